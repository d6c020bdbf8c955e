"""Walk through the perturbation families on a synthetic probe and watch SSIM fall.

Run:  python demos/01_perturb_and_ssim.py [output_dir]
"""

import os
import sys

import numpy as np

from medrobust import registry
from medrobust.imagekit import ssim, save_image
from medrobust.perturb_medical import Modality, perturbations_for
from medrobust.synthetic import probe_set

out_dir = sys.argv[1] if len(sys.argv) > 1 else "demo_out/01"
os.makedirs(out_dir, exist_ok=True)

probes = probe_set()
img = probes[7]  # bright disk over fine texture
print("probe:", img.shape, "mean %.3f" % img.data.mean())

# every perturbation is a function of (image, t, seed); t = 0 hands back the input
out = registry.apply("gaussian_noise", img, 0.0, seed=1)
print("t=0 returns the same object:", out is img)

# the seed fixes the random realization, so the same call is reproducible
a = registry.apply("motion_blur", img, 0.5, seed=3)
b = registry.apply("motion_blur", img, 0.5, seed=3)
print("same seed, same pixels:", np.array_equal(a.data, b.data))

# SSIM against the clean probe as intensity grows
ts = [0.1, 0.3, 0.5, 0.7, 0.9]
print()
print("%-24s" % "perturbation" + "".join("  t=%.1f" % t for t in ts))
for pid, category in perturbations_for(Modality.MRI):
    vals = [ssim(img, registry.apply(pid, img, t, seed=0)) for t in ts]
    print("%-24s" % pid + "".join("  %.3f" % v for v in vals), "" if category == "base" else "(MRI)")

# some artifacts only exist for one modality
for m in (Modality.OCT, Modality.PATHOLOGY, Modality.DERMOSCOPY):
    extra = [p for p, c in perturbations_for(m) if c == "med_specific"]
    print(m.value, "adds", extra)

# save a contact sheet of t = 0.6 outputs for a look
for pid in ("gaussian_noise", "rotation", "mri_bias_field", "mri_ghosting", "oct_blink", "xray_grid"):
    save_image(registry.apply(pid, img, 0.6, seed=0), os.path.join(out_dir, pid + ".png"))
print("\nwrote examples to", out_dir)
