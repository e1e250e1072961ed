"""Significant-pair rates for independent labels and for planted lift-5 pairs."""
import argparse

from mltc.data import DatasetSpec, generate, preset_spec
from mltc.metrics import significant_pair_rate, significant_pairs


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=20)
    args = ap.parse_args()
    print("seed  null rate (%)  planted pairs found")
    for seed in range(args.seeds):
        null = DatasetSpec(num_docs=10_000, num_labels_l1=10, mean_labels_per_doc_l1=1.5, num_labels_l2=60,
                           mean_labels_per_doc_l2=2.5, zipf_exponent=0.0, hierarchical=False,
                           doc_length=(1, 1), seed=seed)
        spec = preset_spec("l2dep", seed=seed, doc_length=(1, 1))
        found = {(i, j) for i, j, _ in significant_pairs(generate(spec).label_matrix(2))}
        hits = sum((p.a, p.b) in found for p in spec.dependency_pairs)
        print(f"{seed:>4}  {significant_pair_rate(generate(null), 2):>13.2f}  {hits}/{len(spec.dependency_pairs)}")


if __name__ == "__main__":
    main()
