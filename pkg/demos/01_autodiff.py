# # Tape-based autodiff
#
# Every learnable computation in mugcp runs on a small reverse-mode engine.
# Operations are recorded only while a `Tape` is open; `backward` fills `.grad`
# on every tensor that asked for one.

# In[1]:

import numpy as np

from mugcp import tensor as T
from mugcp.gradcheck import finite_diff_check
from mugcp.tensor import Tape, Tensor

rng = np.random.default_rng(0)
w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
x = Tensor(rng.normal(size=(5, 3)))

with Tape() as tape:
    loss = T.tsum(T.softmax(x @ w, axis=-1) * T.log(T.softmax(x @ w, axis=-1)))
tape.backward(loss)
print("loss", loss.item())
print("grad shape", w.grad.shape)

# Central differences agree with the tape. The report holds one max relative
# error per parameter.

# In[2]:

report = finite_diff_check(
    lambda p: T.tsum(T.gelu(x @ p["w"]) * T.gelu(x @ p["w"])),
    {"w": Tensor(w.data.copy())})
print(report.errors)

# Non-finite values never propagate silently: the failing op is named.

# In[3]:

try:
    T.log(Tensor(np.array([1.0, -1.0])))
except Exception as exc:
    print(type(exc).__name__, exc)

# Precision is scoped. Training defaults to 32-bit; checks use 64-bit.

# In[4]:

with T.precision("f32"):
    print(Tensor([1.0, 2.0]).data.dtype)
print(Tensor([1.0, 2.0]).data.dtype)
