# coding: utf-8

# # Timing an epoch per batching mode
#
# Eight volumes per crop size at 64, 80 and 96 voxels, the tiny encoder with
# 16^3 patches. Each mode trains one epoch from the same start; the median
# of three repeats is reported. Roughly half a minute.

import tempfile

from varivit import bench
from varivit.data import DEFAULT_BINS, generate_dataset
from varivit.encoder import ModelConfig

vols = generate_dataset(0, 8, DEFAULT_BINS, patch_size=16)
cfg = ModelConfig.tiny(patch_size=16, max_image_edge=96)
report = bench.run_bench(vols, cfg, ("cbs", "ga", "pad"), repeats=3)
print(bench.emit_report(report, tempfile.mkdtemp(prefix="bench_")))


# Per-edge step time grows with the number of patches.

for edge, n, count, s in report.size_sweep:
    print(f"edge {edge}: {n:3d} patches, {1000 * s / count:.1f} ms per sample")
