# # Supervision text, templates and losses
#
# Auxiliary text comes from two templates. The custom template describes what
# the image shows; the expansion prompt asks a language model for
# distinguishing features. Live model calls are replaced by files.

# In[1]:

import math

import numpy as np

from mugcp.objectives import (AugmentedTextBank, cc_loss, ce_loss, render_custom_template,
                              render_llm_prompt, sample_supervision)

print(render_custom_template("balance beam", "olympic competition"))
print(render_llm_prompt("airplane", "aircraft types", "a white and blue airplane on the runway"))

# Cross-entropy over cosine logits. With identical class rows it is ln K.

# In[2]:

f = np.array([0.3, -1.0, 2.0])
print(ce_loss(f, np.tile([1.0, 2.0, 0.5], (5, 1)), 0, None, 0.01).item(), math.log(5))

# The consistency term pulls trained features toward frozen augmented ones.
# It is 0 when aligned, 2 when orthogonal and 4 when opposite.

# In[3]:

e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
print(cc_loss(e1, e1, e2, e2).item(), cc_loss(e1, e2, e2, e1).item(), cc_loss(e1, -e1, e2, -e2).item())

# Each step draws one sentence embedding for the target class.

# In[4]:

bank = AugmentedTextBank({0: np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])})
rng = np.random.default_rng(0)
draws = [int(np.argmax(sample_supervision(bank, 0, rng) @ bank.embeddings[0].T)) for _ in range(600)]
print(np.bincount(draws))
