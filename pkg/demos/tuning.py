"""Narrow distortion ranges until single distortions stay above 20 dB.

Starts from a deliberately wide Gaussian noise range on unit-scale patches
and prints the halving audit trail. On a 7x7 patch most zoom factors near 1
round back onto the same pixels, so zoom's median PSNR is infinite.

    python demos/tuning.py
"""

import numpy as np

from hsidiff import DistortionBounds, PatchSet, tune_bounds


def main():
    rng = np.random.default_rng(0)
    patches = PatchSet.from_array(rng.uniform(0, 1, (10, 7, 7, 20)).astype(np.float32))
    wide = DistortionBounds.from_dict({"gaussian_noise": {"sigma": [0.0, 1.0]}})
    result = tune_bounds(["gaussian_noise", "salt_pepper", "zoom"], patches, psnr_threshold=20.0,
                         rng=np.random.default_rng(1), initial=wide)

    print("step  family            median PSNR  ranges")
    for step in result.audit:
        ranges = ", ".join(f"{k}=[{lo:.4g}, {hi:.4g}]" for k, (lo, hi) in step.ranges.items())
        print(f"{step.step:>4}  {step.family:<16}  {step.median_psnr:>10.2f}  {ranges}")
    print("\ntuned bounds:", result.bounds.to_dict())
    if result.flagged:
        print("never reached the threshold:", result.flagged)


if __name__ == "__main__":
    main()
