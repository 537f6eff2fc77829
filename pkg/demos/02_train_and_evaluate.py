"""Train the default model on a small synthetic corpus and inspect a prediction.

    python demos/02_train_and_evaluate.py [--n-train 60] [--epochs 5] [--out runs/demo]

The acceptance run uses 200 training documents and 20 epochs; the defaults
here finish in a few minutes on one CPU core.
"""
import argparse
from pathlib import Path

from tocextract.data import SyntheticSpec, synthesize_corpus
from tocextract.plots import attention_heatmap, score_histogram
from tocextract.training import TrainingConfig, evaluate, predict, train

parser = argparse.ArgumentParser()
parser.add_argument("--n-train", type=int, default=60)
parser.add_argument("--epochs", type=int, default=5)
parser.add_argument("--out", type=Path, default=Path("runs/demo"))
args = parser.parse_args()

# disjoint generator index ranges keep the splits apart
train_docs = synthesize_corpus(SyntheticSpec(n_docs=args.n_train))
val_docs = synthesize_corpus(SyntheticSpec(n_docs=10, start_index=50_000))
test_docs = synthesize_corpus(SyntheticSpec(n_docs=20, start_index=100_000))

result = train(TrainingConfig(epochs=args.epochs), train_docs, val_docs, out_dir=args.out,
               progress=lambda row: print(f"epoch {row['epoch']:>2}  loss {row['loss_total']:.4f}"
                                          f"  val TEDS {row['eval_teds']:.4f}"))
print(f"best epoch {result.best_epoch}, checkpoint {result.checkpoint}")

report = evaluate(result.model, test_docs)
print(report.to_table())
score_histogram(report, args.out / "scores.png")

# one document, with the decoder's attention over candidate references
rec = test_docs[0]
pred = predict(result.model, rec, trace=True)
print(pred.tree.outline())
labels = [rec.document.entities[i].content for i in pred.heading_rows]
attention_heatmap(pred.trace, labels, args.out / "attention.png", title=pred.doc_id)
print(f"plots written to {args.out}")
