"""Train the default model on the synthetic dataset for several seeds and report test retrieval."""

from _common import dump, parser, prepare, table

from neuroretrieve.experiments import median, negative_sweep


def main():
    args = parser(__doc__).parse_args()
    work, data, cache = prepare(args)
    runs = negative_sweep(data, cache, args.seeds, {"both_all": {}})["both_all"]
    table(runs, ["seed", "mrr", "map", "accuracy", "best_epoch", "seconds"])
    G = runs[0]["n_queries"]
    chance = sum(1 / r for r in range(1, G + 1)) / G
    summary = {"median_mrr": median(runs, "mrr"), "median_map": median(runs, "map"), "chance_mrr": chance}
    print(summary)
    dump(work / "retrieval.json", {"runs": runs, **summary})


if __name__ == "__main__":
    main()
