# # Conditional prompts, mutual guidance and fusion
#
# A per-instance text prompt comes from the cached decoder pass, projected to
# text width. The AMG block turns it into a visual prompt, guided by the image
# tokens. Both are fused with shared context prompts and inserted at every
# encoder layer.

# In[1]:

import numpy as np

from mugcp import DataSpec, MuGCP, PromptConfig, build_backbone, build_dataset
from mugcp.backbone import BackboneConfig
from mugcp.mpf import fuse_prompts, text_layout, visual_layout

backbone = build_backbone(BackboneConfig())
config = PromptConfig()
model = MuGCP(backbone, config)
state = model.init_state(seed=1)
print("trainable groups:", state.groups())
print("parameters:", sum(p.data.size for p in state.values()))

# Fusion broadcasts every conditional token onto every context token and
# averages: each context row gains the mean conditional row.

# In[2]:

rng = np.random.default_rng(0)
p_ctx, p_cond = rng.normal(size=(4, 32)), rng.normal(size=(16, 32))
print(np.allclose(fuse_prompts(p_ctx, p_cond).data, p_ctx + p_cond.mean(axis=0)))

# The fusion mode decides which blocks enter the sequences.

# In[3]:

c = backbone.config
for mode in ("add", "concat", "both"):
    tl = text_layout(mode, config.n_ctx, c.name_len, config.n_cond)
    vl = visual_layout(mode, c.n_patches, config.n_cond, config.n_ctx)
    print(f"{mode:>6}: text {tl['eos'].stop} tokens, image {vl['ctx'].stop} tokens")

# A forward pass gives one image embedding and one text embedding per class.

# In[4]:

data = build_dataset(DataSpec(), backbone, shots=1, seed=1)
inst = data.test_base[0]
f, t = model.encode(state, inst, data.base_classes)
print(f.shape, t.shape)
print("probabilities", np.round(model.probabilities(state, inst, data.base_classes), 3))
