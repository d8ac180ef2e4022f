"""Build the two stock architectures, push a batch through each, and
round-trip their parameters through the binary checkpoint format."""
import tempfile
from pathlib import Path

import numpy as np

import dynat.autodiff as ad
from dynat import build_model, load_checkpoint, named_spec, save_checkpoint, synthetic_blobs

ds = synthetic_blobs(n_per_class=8, classes=4, image_side=12, noise_sigma=0.2, seed=1)
x = ad.Tensor(ds.images[:6])

for name in ("small-mlp", "small-cnn"):
    spec = named_spec(name, input_shape=ds.images.shape[1:], num_classes=4)
    model = build_model(spec, seed=7)
    logits = model.forward(x)
    print(f"{name:10s} {model.num_params():5d} params, "
          f"logits {logits.data.shape}, first row {np.round(logits.data[0], 3)}")
    ad.reset_tape()

# checkpoints are plain little-endian dumps keyed by the spec; loading
# into a mismatched spec is refused rather than silently reshaped
model = build_model(named_spec("small-cnn", ds.images.shape[1:], 4), seed=7)
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "model.ckpt"
    save_checkpoint(model, path)
    clone = load_checkpoint(path, named_spec("small-cnn", ds.images.shape[1:], 4))
    same = all(np.array_equal(model.params[k].data, clone.params[k].data)
               for k in model.params)
    print(f"\ncheckpoint round trip bit-exact: {same}")

    try:
        load_checkpoint(path, named_spec("small-mlp", ds.images.shape[1:], 4))
    except Exception as err:
        print(f"loading into the wrong spec: {type(err).__name__}: {err}")
