"""How many dimensions does a distance-preserving embedding need?

For m points and distortion eps, dimension n > 8 ln(m) / eps^2 always
suffices — independent of the points' original dimension. The calculator
reports the exact ceiling next to the common shorthand that rounds ln(m)
to an integer first.

Run:  python3 demos/06_embedding_dimension.py
"""

from mixerlab.jl import jl_bound, jl_min_dim, jl_shorthand_dim

cases = [
    ("10B-token corpus, one point per next-token task", 10**10, 1.0),
    ("15T tokens", 15 * 10**12, 1.0),
    ("a million times that", 15 * 10**18, 1.0),
]

print(f"{'points m':>12}  {'bound 8ln(m)/eps^2':>20}  {'n_min':>6}  {'shorthand':>9}")
for label, m, eps in cases:
    print(f"{m:12.0e}  {jl_bound(m, eps):20.4f}  {jl_min_dim(m, eps):6d}  {jl_shorthand_dim(m, eps):9d}   # {label}")

print()
print("tightening the distortion is what costs dimensions:")
for eps in (1.0, 0.5, 0.25):
    print(f"  eps={eps:5.2f}: n_min = {jl_min_dim(10**10, eps)}")

print()
print("caution: a quotable figure of '8 ln 10^570 ~ 1312' drops its own")
print(f"factor of 8 — ln(10^570) is about 1312, the full bound is {jl_min_dim(10**570, 1.0)}.")
