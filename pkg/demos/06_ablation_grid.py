# # Ablation grids
#
# Any prompt switch, the consistency weight or the shot count can be swept.
# Each cell trains every configured seed. `write_metrics` produces the same
# files as the `ablate` command.

# In[1]:

import tempfile
from pathlib import Path

from mugcp import load_config, run_ablation_grid
from mugcp.trainer import write_metrics

root = Path(__file__).resolve().parents[1]
exp = load_config(root / "configs" / "toy.toml")
rows = run_ablation_grid(exp, {"mpf_mode": ["add", "concat", "both"],
                               "amg_mode": ["full", "self-only"]})
for r in rows:
    mean = r.record.mean()
    print(r.switches, "text len", r.text_length, "image len", r.visual_length,
          f"hm {mean['hm']:.3f}")

# In[2]:

with tempfile.TemporaryDirectory() as d:
    write_metrics(d, rows)
    print((Path(d) / "metrics.csv").read_text())
