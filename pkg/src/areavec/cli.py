"""Command-line pipeline: synthesize, aggregate, train, anchor, analyze.

Every command that draws randomness takes a required ``--seed``; identical
commands on identical inputs write byte-identical outputs.  Logs go to
stderr, data to files or stdout.  Exit codes: 0 success, 2 configuration
error (including bad flags), 3 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import anchors as anchors_mod
from . import fileio
from .analysis import cluster_profile, kmeanspp_cluster, resolve_embedding, similar_areas
from .anchors import (
    AnchorSchedule,
    AnchorSet,
    Metric,
    ScheduleKind,
    SweepGrid,
    generate_anchor_set,
    misalignment,
    run_appendix_sweeps,
    run_validation_experiment,
    train_anchored,
)
from .errors import AreavecError, ConfigError, DataError
from .mesh import Geocode, aggregate, read_area_table, write_area_table
from .model import TrainConfig, approximation_loss, read_model, train, write_model
from .stays import EMPTY_CALENDAR, HolidayCalendar, read_stays, write_stays
from .synth import city_from_config, generate, planted_city

logger = logging.getLogger("areavec")


def _add_train_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--epochs", type=int, default=600)
    sub.add_argument("--lr", type=float, default=4.0)
    sub.add_argument("--batch", type=int, default=256)


def _train_config(args, schedule: AnchorSchedule | None = None) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        batch_areas=args.batch,
        rng_seed=args.seed,
        schedule=schedule,
    )


def _calendar(args) -> HolidayCalendar:
    if getattr(args, "holidays", None):
        return HolidayCalendar.from_file(args.holidays)
    return EMPTY_CALENDAR


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="areavec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic stays")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--config", help="JSON city description")
    group.add_argument("--planted", type=int, metavar="N", help="N cells per archetype")
    p.add_argument("--users", type=int, default=16)
    p.add_argument("--stays-per-user", type=int, default=30)
    p.add_argument("--origin-lat", type=float, default=35.10)
    p.add_argument("--origin-lon", type=float, default=136.90)
    p.add_argument("--labels-out", help="write planted archetype labels (planted mode)")

    p = sub.add_parser("aggregate", help="aggregate stays into an area table")
    p.add_argument("--stays", required=True)
    p.add_argument("--holidays")
    p.add_argument("--out", required=True)
    p.add_argument("--geojson", help="also export cell polygons")

    p = sub.add_parser("train", help="train embeddings without anchors")
    p.add_argument("--table", required=True)
    p.add_argument("--seed", type=int, required=True)
    _add_train_flags(p)
    p.add_argument("--embeddings-out", required=True)
    p.add_argument("--model-out")

    p = sub.add_parser("gen-anchors", help="build an anchor set from a stays corpus")
    p.add_argument("--stays", required=True)
    p.add_argument("--holidays")
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--records", type=int, default=20000)
    p.add_argument("--seed", type=int, required=True)
    _add_train_flags(p)
    p.add_argument("--records-out", required=True)
    p.add_argument("--embeddings-out", required=True)

    p = sub.add_parser("train-anchored", help="train embeddings against fixed anchors")
    p.add_argument("--table", required=True)
    p.add_argument("--anchor-records", required=True)
    p.add_argument("--anchor-embeddings", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--schedule", choices=[k.value for k in ScheduleKind], default="exponential")
    p.add_argument("--alpha", type=float, default=0.3)
    p.add_argument("--beta", type=float, default=1.0)
    _add_train_flags(p)
    p.add_argument("--embeddings-out", required=True)
    p.add_argument("--model-out")

    p = sub.add_parser("misalign", help="misalignment between two embedding files")
    p.add_argument("--a", dest="file_a", required=True)
    p.add_argument("--b", dest="file_b", required=True)

    p = sub.add_parser("approx-loss", help="approximation loss of a model on a table")
    p.add_argument("--model", required=True)
    p.add_argument("--table", required=True)

    p = sub.add_parser("cluster", help="k-means++ cluster an embedding file")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("profile", help="per-cluster usage profiles from stays")
    p.add_argument("--stays", required=True)
    p.add_argument("--holidays")
    p.add_argument("--embeddings", required=True, help="record CSV with cluster labels")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--svg")

    p = sub.add_parser("search", help="similar areas by cosine similarity")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out")

    p = sub.add_parser("resolve", help="embedding for a mesh, with 250m fallback")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--geocode", required=True)

    p = sub.add_parser("sweep", help="validation experiment or hyper-parameter studies")
    p.add_argument("--stays", required=True, help="target stays corpus")
    p.add_argument("--anchor-stays", help="disjoint corpus for anchors (validation study)")
    p.add_argument("--holidays")
    p.add_argument(
        "--study",
        choices=["validation", "size", "schedule", "alpha"],
        required=True,
    )
    p.add_argument("--seeds", type=_int_list, default=[11, 12, 13])
    p.add_argument("--seed", type=int, required=True, help="seed for anchor building")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--records", type=int, default=5000)
    p.add_argument("--n-anchors", type=_int_list, default=[16, 64, 256])
    p.add_argument("--records-grid", type=_int_list, default=[1000, 5000, 20000])
    p.add_argument("--alphas", type=_float_list, default=[0.1, 0.3, 0.6])
    _add_train_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("export-geojson", help="mesh polygons as GeoJSON")
    p.add_argument("--embeddings", help="record CSV (with optional clusters)")
    p.add_argument("--table", help="area table CSV")
    p.add_argument("--k", type=int, help="attach cluster labels for this k")
    p.add_argument("--out", required=True)

    return parser


def _cmd_synth(args) -> int:
    if args.config:
        city = city_from_config(args.config, args.seed)
        labels = None
    else:
        city, labels = planted_city(
            args.planted,
            args.seed,
            users=args.users,
            stays_per_user=args.stays_per_user,
            origin=(args.origin_lat, args.origin_lon),
        )
    stays = generate(city)
    write_stays(args.out, stays)
    logger.info("wrote %d stays to %s", len(stays), args.out)
    if args.labels_out:
        if labels is None:
            raise ConfigError("--labels-out requires --planted")
        with open(args.labels_out, "w", encoding="utf-8") as fh:
            fh.write("geocode,archetype\n")
            for gid in sorted(labels):
                fh.write(f"{gid},{labels[gid]}\n")
    return 0


def _cmd_aggregate(args) -> int:
    table = aggregate(read_stays(args.stays), _calendar(args))
    write_area_table(args.out, table)
    logger.info("aggregated %s meshes to %s", len(table), args.out)
    if args.geojson:
        fileio.write_geojson(args.geojson, fileio.export_table_geojson(table))
    return 0


def _cmd_train(args) -> int:
    table = read_area_table(args.table)
    model = train(table, _train_config(args))
    rows = fileio.rows_from_embeddings(model.embedding_table())
    fileio.write_embedding_records(args.embeddings_out, rows)
    logger.info("trained %d areas; final loss %.6f", len(table), model.loss_history[-1])
    if args.model_out:
        write_model(args.model_out, model)
    return 0


def _cmd_gen_anchors(args) -> int:
    table = aggregate(read_stays(args.stays), _calendar(args))
    anchor_set = generate_anchor_set(table, args.n, args.records, _train_config(args))
    anchors_mod.write_anchor_records(args.records_out, anchor_set)
    anchors_mod.write_anchor_embeddings(args.embeddings_out, anchor_set)
    logger.info("wrote %d anchors x %d records", anchor_set.n_anchors, args.records)
    return 0


def _load_anchor_set(records_path, embeddings_path) -> AnchorSet:
    anchor_set = anchors_mod.read_anchor_records(records_path)
    refs = anchors_mod.read_anchor_embeddings(embeddings_path)
    if set(refs) != set(anchor_set.records):
        raise DataError("anchor ids in records and embeddings files differ")
    anchor_set.reference_embeddings = np.stack(
        [refs[aid] for aid in sorted(anchor_set.records)]
    )
    return anchor_set


def _cmd_train_anchored(args) -> int:
    table = read_area_table(args.table)
    anchor_set = _load_anchor_set(args.anchor_records, args.anchor_embeddings)
    schedule = AnchorSchedule(ScheduleKind(args.schedule), alpha=args.alpha, beta=args.beta)
    cfg = _train_config(args, schedule)
    embeddings = train_anchored(table, anchor_set, cfg)
    fileio.write_embedding_records(args.embeddings_out, fileio.rows_from_embeddings(embeddings))
    if args.model_out:
        write_model(args.model_out, anchors_mod._train_anchored_model(table, anchor_set, cfg))
    return 0


def _cmd_misalign(args) -> int:
    table_a, _ = fileio.read_embedding_records(args.file_a)
    table_b, _ = fileio.read_embedding_records(args.file_b)
    for metric in (Metric.EUCLIDEAN, Metric.COSINE):
        print(f"{metric.value} {repr(misalignment(table_a, table_b, metric))}")
    return 0


def _cmd_approx_loss(args) -> int:
    model = read_model(args.model)
    table = read_area_table(args.table)
    print(repr(approximation_loss(model, table)))
    return 0


def _cmd_cluster(args) -> int:
    table, rows = fileio.read_embedding_records(args.embeddings)
    assignment = kmeanspp_cluster(table, args.k, args.seed)
    for row in rows:
        row.set_cluster_label(args.k, assignment.labels[row.geocode])
    fileio.write_embedding_records(args.out, rows)
    logger.info("clustered %d areas into %d clusters", len(table), args.k)
    return 0


def _cmd_profile(args) -> int:
    table = aggregate(read_stays(args.stays), _calendar(args))
    _, rows = fileio.read_embedding_records(args.embeddings)
    labels = {}
    for row in rows:
        label = row.cluster_label(args.k)
        if label is None:
            raise DataError(f"area {row.geocode} has no cluster{args.k} label")
        labels[row.geocode] = label
    from .analysis import ClusterAssignment

    assignment = ClusterAssignment(
        k=max(labels.values()) + 1,
        labels=labels,
        centroids=np.zeros((max(labels.values()) + 1, 8)),
    )
    profile = cluster_profile(assignment, table)
    fileio.write_profile(args.out, profile)
    if args.svg:
        with open(args.svg, "w", encoding="utf-8") as fh:
            fh.write(fileio.profile_svg(profile))
    return 0


def _cmd_search(args) -> int:
    table, _ = fileio.read_embedding_records(args.embeddings)
    hits = similar_areas(table, args.query, args.threshold)
    lines = ["area_id,similarity"] + [f"{aid},{repr(sim)}" for aid, sim in hits]
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_resolve(args) -> int:
    table, _ = fileio.read_embedding_records(args.embeddings)
    vec = resolve_embedding(table, Geocode.from_string(args.geocode))
    print(" ".join(repr(float(v)) for v in vec))
    return 0


def _cmd_sweep(args) -> int:
    target = aggregate(read_stays(args.stays), _calendar(args))
    cfg = _train_config(args)
    if args.study == "validation":
        corpus_path = args.anchor_stays or args.stays
        corpus = aggregate(read_stays(corpus_path), _calendar(args))
        anchor_set = generate_anchor_set(corpus, args.n, args.records, cfg)
        report = run_validation_experiment(target, anchor_set, args.seeds, cfg).to_dict()
    else:
        grid = SweepGrid(
            n_anchors=args.n_anchors,
            records_per_anchor=args.records_grid,
            alphas=args.alphas,
            seeds=args.seeds,
            schedule_n_anchors=args.n,
            schedule_records=args.records,
        )
        report = run_appendix_sweeps(target, grid, cfg, studies=(args.study,))
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    logger.info("wrote %s study report to %s", args.study, args.out)
    return 0


def _cmd_export_geojson(args) -> int:
    if bool(args.embeddings) == bool(args.table):
        raise ConfigError("pass exactly one of --embeddings or --table")
    if args.embeddings:
        _, rows = fileio.read_embedding_records(args.embeddings)
        collection = fileio.export_geojson(rows, cluster_k=args.k)
    else:
        collection = fileio.export_table_geojson(read_area_table(args.table))
    fileio.write_geojson(args.out, collection)
    return 0


_HANDLERS = {
    "synth": _cmd_synth,
    "aggregate": _cmd_aggregate,
    "train": _cmd_train,
    "gen-anchors": _cmd_gen_anchors,
    "train-anchored": _cmd_train_anchored,
    "misalign": _cmd_misalign,
    "approx-loss": _cmd_approx_loss,
    "cluster": _cmd_cluster,
    "profile": _cmd_profile,
    "search": _cmd_search,
    "resolve": _cmd_resolve,
    "sweep": _cmd_sweep,
    "export-geojson": _cmd_export_geojson,
}


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as exc:
        logger.error("%s", exc)
        return 2
    except (DataError, KeyError, OSError) as exc:
        logger.error("%s", exc)
        return 3
    except AreavecError as exc:
        logger.error("%s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
