"""Compare noise-handling strategies across a full task stream.

Runs the complete pipeline (selection, attack, contrastive training,
memory replay, nearest-prototype inference) against its ablations and the
two classifier baselines on a compact 3-task stream, three seeds each.

The full benchmark lives in the acceptance suite
(tests/test_acceptance.py); this script is a fast narrative version.
"""

from noisycre import harness, reporting

config = harness.RunConfig(
    n_relations=9,
    train_per_relation=120,
    test_per_relation=30,
    input_dim=16,
    separation=6.0,
    n_tasks=3,
    noise_rate=0.3,
    lr=3e-3,
    aux_hidden_dim=64,
    aux_encoder_dim=8,
    lr_aux=5e-4,
)

result = harness.ablate(
    config,
    methods=["nacl", "noise-retain", "discard", "finetune", "joint"],
    seeds=[0, 1, 2],
)
print(reporting.ablation_table(result["summary"]))

nacl = result["reports"]["nacl"][0]
print("first nacl run, accuracy on each seen task after every stage:")
for k, row in enumerate(nacl.accuracy_matrix):
    cells = "  ".join(f"{a:.3f}" for a in row)
    print(f"  after task {k}: {cells}")
print("\nper-task attack success rate:",
      [round(t.asr, 3) if t.asr is not None else None for t in nacl.tasks])
print("buffer purity trail:",
      [round(t.buffer_purity, 3) if t.buffer_purity is not None else None for t in nacl.tasks])
