"""End-to-end smoke test of the `vlp` extension module.

Build and install it first, e.g. `maturin develop -m crates/py/Cargo.toml`,
then run `python python/smoke_test.py`.
"""

import math
import tempfile
from pathlib import Path

import vlp

SPEC = """
records = 12
topics = 2
vocab_size = 16
frame_dim = 4
min_frames = 2
max_frames = 4
min_tokens = 3
max_tokens = 6
"""

CONFIG = """
steps = 6
batch_size = 4
min_negatives = 2
include_queues = true

[model]
hidden = 8
heads = 2
enc_blocks = 1
dec_blocks = 1
max_text = 8
max_frames = 4
vocab_size = 16
frame_dim = 4
ff_mult = 2

[finetune]
steps = 10
batch_size = 4
negatives = 5
plot_classes = 2
"""


def check_ops():
    # Orthonormal query/positive/negatives: loss = ln(1 + K exp(-1/tau)).
    q = [1.0, 0.0, 0.0, 0.0]
    negs = [[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]]
    got = vlp.info_nce(q, q, negs, 0.7)
    assert abs(got - math.log(1 + 2 * math.exp(-1 / 0.7))) < 1e-12, got

    assert vlp.corpus_bleu([[4, 5, 6, 7, 8]], [[4, 5, 6, 7, 8]]) == 1.0
    assert abs(vlp.corpus_bleu([[4, 5, 6, 7]], [[4, 5, 6, 7, 8]], 1) - math.exp(-0.25)) < 1e-12
    assert vlp.rouge_l([4, 5, 6], [7, 8, 9]) == 0.0
    assert vlp.recall_at_k([1, 3, 7], 5) == 2 / 3
    try:
        vlp.corpus_bleu([], [])
    except ValueError:
        pass
    else:
        raise AssertionError("empty references accepted")


def check_pipeline(tmp: Path):
    try:
        vlp.TrainConfig("learning_rat = 0.1")
    except ValueError as e:
        assert "learning_rat" in str(e)
    else:
        raise AssertionError("unknown key accepted")

    data = vlp.Dataset.synthetic(SPEC)
    assert len(data) == 12
    data.save(tmp / "data.rec")
    assert vlp.Dataset.load(tmp / "data.rec").ids() == data.ids()

    config = vlp.TrainConfig(CONFIG)
    assert "mlm" in config.tasks() and config.temperature == 0.7

    trainer = vlp.Pretrainer(config, data)
    first = trainer.train_step()
    assert math.isfinite(first["total"]) and trainer.step == 1
    totals = trainer.run(tmp / "run")
    assert len(totals) == 5 and trainer.step == 6
    header = (tmp / "run" / "metrics.tsv").read_text().splitlines()[0]
    assert header.startswith("step\tmlm")

    ckpt = vlp.Checkpoint.load(tmp / "run" / "final.ckpt")
    assert ckpt.step == 6 and ckpt.has_queues()

    before = vlp.evaluate("retrieval-text", ckpt, data, config)
    assert before["candidates"] == 6
    losses = vlp.finetune("plot", ckpt, data, config)
    assert len(losses) == 10 and losses[-1] < losses[0], losses
    acc = vlp.evaluate("plot", ckpt, data, config)["accuracy_plot"]
    assert 0.0 <= acc <= 1.0

    rows = vlp.export_embeddings(ckpt, data)
    assert [r[0] for r in rows] == data.ids()
    assert all(len(r[1]) == ckpt.hidden for r in rows)
    return totals[-1], acc


def main():
    check_ops()
    with tempfile.TemporaryDirectory() as tmp:
        loss, acc = check_pipeline(Path(tmp))
    print(f"ok: final pre-training loss {loss:.4f}, plot accuracy {acc:.3f}")


if __name__ == "__main__":
    main()
