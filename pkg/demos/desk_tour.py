"""Train a small ResNet on synthetic gratings, then run every analysis on it.

Usage: python demos/desk_tour.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from netscope import actmax as AM
from netscope import fixtures
from netscope import graph as G
from netscope import mine as M
from netscope import probe as P
from netscope import train as TR
from netscope import vfilter as VF
from netscope.data import compute_whiten

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/desk_tour")
out.mkdir(parents=True, exist_ok=True)

# gratings: class = orientation, so early channels should pick up oriented edges
train_set = fixtures.gratings(384, 32, 4, seed=11)
val_set = fixtures.gratings(64, 32, 4, seed=12, split="val")
whiten = compute_whiten(train_set)
model = G.build_scaled("resnet", [1, 1], 16, (3, 32, 32), 4, seed=3)
cfg = TR.TrainConfig(lr0=0.05, epochs=6, batch=32, lr_drop_every=4, seed=5)
result = TR.train(model, train_set, val_set, cfg, whiten, out_dir=out / "train")
model = result.model
loss, top1 = TR.evaluate(model, val_set, whiten)
print(f"val loss {loss:.4f}  top-1 error {top1:.3f}")

# preferred stimuli of the maxpool channels, with both neuron choices
images = M.images_by_id(val_set, whiten)
for mode in M.NEURON_MODES:
    records = M.scan(model, val_set, "stem.maxpool", neuron_mode=mode, whiten=whiten)
    for c in (0, 1):
        M.export_grid(M.topk(records[c], 9), images, out / f"top9_{mode}_c{c}.ppm", whiten, scale=4)
        mean = M.mean_preferred(records[c], images)
        M.export_mean(mean, out / f"mean_{mode}_c{c}.ppm", scale=4)
        print(f"{mode} channel {c}: {mean.n} positive responses, {mean.n_averaged} unclipped patches averaged")

# virtual filters of the stem conv, seen through the first projection shortcut
# and through the first main-path conv
w1 = model.params["stem.conv.weight"]
for second in ("downsample2.conv", "stage1.block1.conv1"):
    vf = VF.virtual_filter(w1, model.params[f"{second}.weight"], 0)
    VF.export_vfilter_report(vf, w1, out, scale=8, prefix=f"vfilter_{second}_p0")
    print(f"{second}: strongest coupling {vf.couplings[0]}")

# activation maximisation of one stem-conv neuron
am_cfg = AM.ActMaxConfig("layer1", 0)
am = AM.adam_ascent(model, am_cfg)
AM.export_actmax(am, whiten, out / "actmax_c0.ppm", crop=AM.target_rf(model, am_cfg), scale=8)
print(f"actmax objective {am.trajectory[0][1]:.3g} -> {am.final_activation:.3g}")

# inactive channels and their sensitivity to noise
report = P.find_inactive(model, val_set, whiten=whiten)
print("inactive maxpool channels:", report.inactive or "none")
if report.inactive:
    res = P.eval_noised(model, val_set, report, "all", whiten=whiten)
    print(f"noise in inactive channels changes loss by {res.delta:+.4g}")
print("outputs in", out, "| weights finite:", all(np.isfinite(v).all() for v in model.params.values()))
