"""Split a noisy task into pseudo-clean and pseudo-noisy sets.

A freshly initialized task-local classifier is trained for three epochs on
the observed (30% corrupted) labels; thresholding the confidence it assigns
to each observed label separates the populations almost perfectly.  The
same script then disables the reboot to show why it matters.
"""

import numpy as np

from noisycre import datastream as ds, denoise, models

rng_fixture = ds.synthetic_stream(
    n_relations=12, train_per_relation=120, test_per_relation=10,
    input_dim=16, separation=6.0, n_tasks=3,
    noise=ds.NoiseSpec(rate=0.3, seed=1), seed=0,
)
task = rng_fixture.tasks[0]
encoder = models.EncoderConfig(kind=models.VECTOR, embed_dim=16, hidden_dim=32, out_dim=32)
config = denoise.SelectionConfig(gamma=0.6, aux_epochs=3, batch_size=16)

aux = denoise.train_auxiliary(task.train, task.relations, encoder, config, seed=0, lr=1e-3)
selection = denoise.select_clean(aux, task.train, task.relations, gamma=0.6)
flags = {e.id: e.is_corrupted for e in task.train}
quality = denoise.selection_quality(selection, flags)

print(f"task 0: {len(selection.clean)} selected clean, {len(selection.noisy)} pseudo-noisy")
print(f"precision {quality.precision:.3f}, recall {quality.recall:.3f}\n")

# Text histogram of the two confidence populations.
clean_conf = [selection.confidences[e.id] for e in task.train if not e.is_corrupted]
noisy_conf = [selection.confidences[e.id] for e in task.train if e.is_corrupted]
print("confidence     truly-clean  truly-noisy")
for lo in np.arange(0.0, 1.0, 0.1):
    hi = lo + 0.1
    a = sum(lo <= c < hi for c in clean_conf)
    b = sum(lo <= c < hi for c in noisy_conf)
    print(f"[{lo:.1f}, {hi:.1f})  {'#' * (a // 8):<14} {'#' * (b // 8)}")

separation_rebooted, separation_warm = denoise.reboot_separation_diagnostic(
    rng_fixture, encoder, config, seed=0, lr=1e-3
)
print(f"\nfinal-task confidence separation, rebooted:     {separation_rebooted:.3f}")
print(f"final-task confidence separation, warm-started: {separation_warm:.3f}")
print("re-initializing per task keeps the clean/noisy gap at least as wide.")
