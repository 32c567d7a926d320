"""Negative-sampling ablation: strategy none vs both, and sample size m in {1, 4, all}."""

from _common import dump, parser, prepare

from neuroretrieve.experiments import NEGATIVE_VARIANTS, median, negative_sweep


def main():
    args = parser(__doc__).parse_args()
    work, data, cache = prepare(args)
    sweep = negative_sweep(data, cache, args.seeds, NEGATIVE_VARIANTS)
    print(f"{'variant':>10}  {'median MRR':>10}  per seed")
    for name, runs in sweep.items():
        print(f"{name:>10}  {median(runs, 'mrr'):>10.4f}  " + " ".join(f"{r['mrr']:.4f}" for r in runs))
    dump(work / "negative_sampling.json", {k: [r["mrr"] for r in v] for k, v in sweep.items()})


if __name__ == "__main__":
    main()
