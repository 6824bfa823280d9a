# %% [markdown]
# Protecting toy faces against a toy forger
#
# Train the toy zoo, craft the two-stage perturbation, then look at what it
# does to the forger's output and to the face detectors.  Runs in roughly
# two minutes on one core.  Artifacts land in ``notebooks/out/``.

# %%
from pathlib import Path

import numpy as np

from tsdf.cli import noise_like, save_models, write_png
from tsdf.fusion import TsdfConfig, craft_tsdf, save_perturbation
from tsdf.harness import detector_f1s, forge, forged_ssim, imperceptibility, stack_images, synth_dataset
from tsdf.zoo import TrainConfig, train_toy_models

OUT = Path(__file__).resolve().parent / "out"
OUT.mkdir(exist_ok=True)
SEED = 7

# %%
samples = synth_dataset(512, SEED)
images = stack_images(samples)
craft, held = images[:128], images[-64:]
boxes = [s.face_box for s in samples[-64:]]
print(images.shape, images.dtype)

# %%
# about a minute: two extractors, one autoencoder, two detectors
extractors, generator, detectors = train_toy_models(samples, TrainConfig(), SEED)
save_models(OUT / "models", extractors, generator, detectors)

# %%
losses = []
p = craft_tsdf(
    craft, extractors, detectors, TsdfConfig(), on_interruption=lambda t, W, loss: losses.append(loss)
)
save_perturbation(OUT / "perturbation.tsdp", p)
print(f"interruption loss {losses[0]:.3g} -> {losses[-1]:.3g}")
print("poison mask covers", f"{(p.mask > 0).mean():.1%}", "of elements")

# %% [markdown]
# The forger's output on a protected face should drift far more than under
# plain noise of the same budget, while the protected image itself stays
# close to the original.

# %%
noise = noise_like(p.W0.shape, p.epsilon, SEED)
for name, delta in [("noise", noise), ("interruption-only", p.W0), ("tsdf", p.delta_final)]:
    q = imperceptibility(held, delta)
    f1 = detector_f1s(detectors, held, boxes, delta)
    print(f"{name:>18}: forged SSIM {forged_ssim(generator, held, delta):.3f}"
          f"  image PSNR {q.psnr:.1f}  detector F1 {np.round(f1, 3)}")

# %%
# one strip: original, protected, forged original, forged protected
x = held[:1]
xp = np.clip(x + p.delta_final, 0, 1)
strip = np.concatenate([x[0], xp[0], forge(generator, x)[0], forge(generator, xp)[0]], axis=2)
write_png(OUT / "strip.png", strip)
print("wrote", OUT / "strip.png")
