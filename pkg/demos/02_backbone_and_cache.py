# # Frozen backbone and the offline KV-cache
#
# The backbone is a seeded stand-in for a pretrained dual encoder plus one
# decoder layer. Its weights are read-only, and its fingerprint lets training
# prove they never changed.

# In[1]:

import numpy as np

from mugcp import BackboneConfig, DataSpec, build_backbone, build_dataset
from mugcp.backbone import CacheStore, encode_instance_offline, instance_tokens
from mugcp.scp import generate_pd
from mugcp.tensor import Tensor

backbone = build_backbone(BackboneConfig())
print(backbone.config)
print("weights:", len(backbone), "fingerprint:", backbone.fingerprint()[:16])

data = build_dataset(DataSpec(), backbone, shots=4, seed=1)
inst = data.train[0]
print(inst.instance_id, backbone.class_names[inst.class_id])

# Each instance is encoded once: image tokens followed by caption tokens, and
# the decoder keys and values are stored per head.

# In[2]:

cache = encode_instance_offline(backbone, inst)
print("tokens", instance_tokens(backbone, inst).shape, "keys", cache.keys.shape)

# Learnable queries attend over the cached keys and values plus their own.
# The result matches running the decoder over the joint sequence.

# In[3]:

p_q = Tensor(np.random.default_rng(1).normal(0, 0.02, size=(16, backbone.config.d_mllms)))
p_d = generate_pd(backbone, p_q, cache)
print("P_D", p_d.shape)

# A `CacheStore` builds each cache once and reuses it across epochs.

# In[4]:

store = CacheStore()
a = store.get(backbone, inst)
b = store.get(backbone, inst)
print("reused:", a is b, "entries:", len(store))
