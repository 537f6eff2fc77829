"""Compare modality masks, fusion strategies and the depth-class baseline.

    python demos/03_ablation.py [--n-docs 20] [--epochs 2] [--groups mask,fusion,decoding]

Every variant is trained from scratch on the same split, so the table is only
meaningful relative to itself; at these sizes the differences are noisy.
"""
import argparse

from tocextract.ablation import format_table, run_ablation
from tocextract.data import SyntheticSpec, synthesize_corpus
from tocextract.training import TrainingConfig

parser = argparse.ArgumentParser()
parser.add_argument("--n-docs", type=int, default=20)
parser.add_argument("--epochs", type=int, default=2)
parser.add_argument("--groups", default="mask,fusion,decoding")
args = parser.parse_args()

docs = synthesize_corpus(SyntheticSpec(seed=7, n_docs=args.n_docs))
cut = max(1, len(docs) * 3 // 4)
rows = run_ablation(TrainingConfig(epochs=args.epochs), docs[:cut], docs[cut:],
                    groups=args.groups.split(","),
                    progress=lambda r: print(f"  {r.group}/{r.name}: TEDS {r.teds:.4f}", flush=True))
print(format_table(rows))
