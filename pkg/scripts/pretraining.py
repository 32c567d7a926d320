"""Forecasting pre-training, then contrastive fine-tuning; compared with training from scratch."""

from _common import dump, parser, prepare

from neuroretrieve.experiments import median, negative_sweep, pretraining_runs


def main():
    args = parser(__doc__).parse_args()
    work, data, cache = prepare(args)
    pre, tuned = pretraining_runs(data, work / "encoders", cache, args.seeds)
    scratch = negative_sweep(data, cache, args.seeds, {"both_all": {}})["both_all"]
    for p, t, s in zip(pre, tuned, scratch):
        print(
            f"seed {p['seed']}: val MAE {p['init_val_mae']:.4f} -> {p['final_val_mae']:.4f} "
            f"({100 * p['reduction']:.1f}% lower); MRR fine-tuned {t['mrr']:.4f} vs scratch {s['mrr']:.4f}"
        )
    print(f"median MRR fine-tuned {median(tuned, 'mrr'):.4f} vs scratch {median(scratch, 'mrr'):.4f}")
    dump(work / "pretraining.json", {"pretrain": pre, "finetuned": tuned, "scratch": scratch})


if __name__ == "__main__":
    main()
