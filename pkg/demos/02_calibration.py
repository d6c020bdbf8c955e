"""Severity calibration: find the intensity that lands each image in an SSIM band.

Run:  python demos/02_calibration.py
"""

from collections import Counter

from medrobust.calibrate import SEVERITY_LEVELS, calibrate
from medrobust.perturb_base import BaseKind
from medrobust.seeding import application_seed
from medrobust.synthetic import probe_set

for lvl, band in SEVERITY_LEVELS.items():
    print("level %d: SSIM in [%.2f, %.2f]" % (lvl, band.band_low, band.band_high))

img = probe_set()[0]

# one search: the seed is frozen, only t moves
e = calibrate(img, "gaussian_noise", 3, seed=42)
print("\ngaussian_noise level 3 -> t=%.4f ssim=%.4f converged=%s after %d evaluations"
      % (e.t, e.achieved_ssim, e.converged, e.iterations))

# a level may be out of reach: the search reports it instead of guessing
e = calibrate(img, "oct_blink", 1, seed=42)
print("oct_blink level 1      -> t=%.4f ssim=%.4f converged=%s" % (e.t, e.achieved_ssim, e.converged))

# convergence over the probe set for the base kinds
hits, total = Counter(), Counter()
for i, probe in enumerate(probe_set()):
    for kind in BaseKind:
        for lvl in SEVERITY_LEVELS:
            seed = application_seed(0, "probes", "p%d" % i, kind.value, lvl)
            total[lvl] += 1
            hits[lvl] += calibrate(probe, kind.value, lvl, seed).converged
print()
for lvl in SEVERITY_LEVELS:
    print("level %d: %3d/%d base calibrations converged" % (lvl, hits[lvl], total[lvl]))
