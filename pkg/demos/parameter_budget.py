"""
Where the parameters go
=======================

Each improvement can be switched off on its own.  The analytic counts below
use the full-size settings and need no model instantiation.
"""

from persona_ar.config import TOGGLES, ModelConfig, AR_BASELINE
from persona_ar.model import count_parameters

rows = {"AR+": ModelConfig()}
rows.update({f"-{t}": ModelConfig().without(t) for t in TOGGLES})
rows["AR (all off)"] = AR_BASELINE

components = [k for k in count_parameters(ModelConfig()) if k != "total"]
print(f"{'variant':14s}" + "".join(f"{c[:12]:>14s}" for c in components) + f"{'total':>14s}")
for name, cfg in rows.items():
    c = count_parameters(cfg)
    print(f"{name:14s}" + "".join(f"{c[k]:14,d}" for k in components) + f"{c['total']:14,d}")

# the persona memory dominates AR+: four shared word tables of 10004 x 512
print("\nmemory share of AR+: {:.0%}".format(
    count_parameters(ModelConfig())["persona_memory"] / count_parameters(ModelConfig())["total"]))
