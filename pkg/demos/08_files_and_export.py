"""
Checkpoints, reports and point clouds
=====================================
"""

import json
import tempfile
from pathlib import Path


from nrsfm.evaluation import Reconstructor
from nrsfm.formats import load_checkpoint, read_ply, save_checkpoint, write_ply
from nrsfm.networks import TrunkConfig
from nrsfm.synthgen import SynthConfig, generate
from nrsfm.training import TrainConfig, fit

out = Path(tempfile.mkdtemp())
ds = generate(SynthConfig(K=12, D_true=2, num_shapes=10, views_per_shape=5, seed=3))
cfg = TrainConfig(max_epochs=3, batch_size=16, lr=0.01, D=3,
                  trunk=TrunkConfig(num_blocks=1, outer=32, bottleneck=16))
trainer, _ = fit(ds, cfg)

save_checkpoint(trainer, out / "model.json")
again = load_checkpoint(out / "model.json")
save_checkpoint(again, out / "copy.json")
print("checkpoint re-save is byte identical:",
      (out / "model.json").read_bytes() == (out / "copy.json").read_bytes())
print("checkpoint keys", sorted(json.loads((out / "model.json").read_text()))[:6], "...")

# continue training from the checkpoint
again.cfg.max_epochs = 5
again, _ = fit(ds, again.cfg, trainer=again)
print("resumed to epoch", again.epoch)

model = Reconstructor(again.weights, again.stats, again.loss_cfg.estimate_translation)
X = model.reconstruct_views(ds.Y[:1], ds.v[:1])["camera"][0]
write_ply(out / "view0.ply", X, ds.v[0])
ply = read_ply(out / "view0.ply")
print("PLY points", len(ply["x"]), "first", ply["x"][0], ply["y"][0], ply["z"][0])
print((out / "view0.ply").read_text().splitlines()[:8])
