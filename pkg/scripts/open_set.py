"""Hold one class out of training and measure top-1 retrieval accuracy on its test queries."""

from _common import dump, parser, prepare

from neuroretrieve.experiments import OPEN_CLASS, median, open_set_runs


def main():
    p = parser(__doc__)
    p.add_argument("--open-class", default=OPEN_CLASS)
    args = p.parse_args()
    work, data, cache = prepare(args)
    runs = open_set_runs(data, cache, args.seeds, args.open_class)
    rows = [r["open_set"] for r in runs]
    for s, r in zip(args.seeds, rows):
        print(f"seed {s}: top-1 {r['top1_accuracy']:.3f}  MRR {r['mrr']:.3f}  (prevalence {r['gallery_prevalence']:.3f})")
    print(f"median top-1 {median(rows, 'top1_accuracy'):.3f}")
    dump(work / "open_set.json", {"open_class": args.open_class, "runs": rows})


if __name__ == "__main__":
    main()
