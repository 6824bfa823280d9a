# %% [markdown]
# Does the protection survive an attacker who retrains?
#
# The attacker scrapes protected images, crops faces with its own detector and
# fine-tunes the forger on the crops.  Reuses the models and perturbation
# written by ``01_protect_and_forge.py``.

# %%
from pathlib import Path

from tsdf.cli import load_models
from tsdf.fusion import load_perturbation
from tsdf.harness import PersistenceConfig, reports_to_csv, run_persistence_experiment, synth_dataset

OUT = Path(__file__).resolve().parent / "out"
SEED = 7

models = load_models(OUT / "models")
p = load_perturbation(OUT / "perturbation.tsdp")
samples = synth_dataset(512, SEED)

# %%
reports = run_persistence_experiment(PersistenceConfig(), SEED, models=models, dataset=samples, perturbation=p)
for r in reports:
    print(f"{r.condition:>18}: crops {r.n_crops:3d} (yield {r.crop_yield:.2f})"
          f"  forged SSIM {r.ssim_before:.3f} -> {r.ssim_after:.3f}")

# %% [markdown]
# Interruption alone is undone by retraining: the forger learns to ignore a
# fixed pattern it sees in every crop.  The poisoning stage is meant to stop
# the attacker from collecting crops in the first place, which shows up as a
# lower yield for the tsdf row.

# %%
(OUT / "persistence.csv").write_text(reports_to_csv(reports))

# %%
# the same experiment with the literal resize crop
literal = run_persistence_experiment(
    PersistenceConfig(crop_mode="resize"), SEED, models=models, dataset=samples, perturbation=p
)
for r in literal:
    print(f"{r.condition:>18}: forged SSIM {r.ssim_before:.3f} -> {r.ssim_after:.3f}")
