"""Command-line entry points.

Exit codes: 0 success, 1 domain failure (violations, contract errors),
2 IO or schema failure. Set OVSCENE_THREADS to cap BLAS threads.
"""

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field

from . import __version__
from .core import ConceptSpace, dumps_dataset, load_dataset, validate_graph
from .validation import ContractError, SchemaError

log = logging.getLogger("ovscene")

EXIT_OK, EXIT_DOMAIN, EXIT_IO = 0, 1, 2


class DomainFailure(Exception):
    """The run completed but found problems (e.g. validation violations)."""


def write_atomic(path, text):
    """Write `text` to `path` through a temp file in the same directory and a rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    write_atomic(path, json.dumps(obj, indent=2, sort_keys=False) + "\n")


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int = None
    inputs: dict = field(default_factory=dict)  # path -> sha256
    outputs: dict = field(default_factory=dict)
    status: str = "running"
    exit_code: int = None
    started: float = field(default_factory=time.time)
    finished: float = None
    duration_s: float = None
    summary: dict = field(default_factory=dict)
    environment: dict = field(default_factory=lambda: {
        "version": __version__, "python": platform.python_version()})

    def add_input(self, path):
        if path is not None:
            self.inputs[str(path)] = sha256_file(path)

    def add_output(self, path):
        self.outputs[str(path)] = sha256_file(path)

    def write(self, path):
        if path is not None:
            write_json(path, asdict(self))

    def finalize(self, path, exit_code):
        self.exit_code = exit_code
        self.status = {EXIT_OK: "ok", EXIT_DOMAIN: "domain-failure"}.get(exit_code, "io-failure")
        self.finished = time.time()
        self.duration_s = round(self.finished - self.started, 6)
        self.write(path)


def load_config(path):
    if path is None:
        return {}
    with open(path) as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"config {path} is not JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise SchemaError("config must be a JSON object")
    return obj


def merged(args, keys):
    """Config-file values overridden by any flag given on the command line."""
    cfg = load_config(getattr(args, "config", None))
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def _concepts(path):
    return ConceptSpace.load(path) if path else None


# --- commands ---------------------------------------------------------------

def cmd_validate(args, m):
    m.add_input(args.dataset)
    m.add_input(args.concepts)
    graphs = load_dataset(args.dataset)
    cs = _concepts(args.concepts)
    report = {"n_images": len(graphs), "violations": []}
    for g in graphs:
        for v in validate_graph(g, cs):
            report["violations"].append({"image_id": g.image_id, "field": v.field,
                                         "rule": v.rule, "message": v.message})
    report["n_violations"] = len(report["violations"])
    m.summary = {"n_images": len(graphs), "n_violations": report["n_violations"]}
    text = json.dumps(report, indent=2) + "\n"
    if args.out:
        write_atomic(args.out, text)
        m.add_output(args.out)
    else:
        sys.stdout.write(text)
    if report["violations"]:
        raise DomainFailure(f"{report['n_violations']} violations")


def cmd_split(args, m):
    from .splits import SplitSpec, make_split, split_census, split_dataset
    cfg = merged(args, ["setting", "seed"])
    m.config.update(cfg)
    m.add_input(args.dataset)
    graphs = load_dataset(args.dataset)
    if args.split_file:
        m.add_input(args.split_file)
        spec = SplitSpec.load(args.split_file)
        if cfg.get("setting") and cfg["setting"] != spec.setting:
            raise ContractError(f"--setting {cfg['setting']} disagrees with split file "
                                f"({spec.setting})")
    else:
        if "setting" not in cfg:
            raise ContractError("give --setting or --split-file")
        cs = _concepts(args.concepts)
        m.add_input(args.concepts)
        if cs is None:
            cs = _vocabulary_from(graphs)
        m.seed = int(cfg.get("seed", 0))
        spec = make_split(cs, cfg["setting"], m.seed)
    relation, detection = split_dataset(graphs, spec)
    census = split_census(graphs, spec)
    out = args.out_dir
    files = {"relation.json": dumps_dataset(relation),
             "detection.json": dumps_dataset(detection),
             "split.json": json.dumps(spec.to_json(), indent=2) + "\n",
             "census.json": json.dumps({"setting": spec.setting, **census._asdict(),
                                        "detection_only_images": len(detection)}, indent=2) + "\n"}
    for name, text in files.items():
        write_atomic(os.path.join(out, name), text)
        m.add_output(os.path.join(out, name))
    m.summary = census._asdict()
    print(json.dumps({"setting": spec.setting, **census._asdict()}))


def _vocabulary_from(graphs):
    objects = sorted({n.category for g in graphs for n in g.nodes})
    relations = sorted({e.predicate for g in graphs for e in g.edges})
    return ConceptSpace.random(objects, relations, 8, seed=0)


def cmd_parse_captions(args, m):
    from .weak_supervision import Lexicon, default_lexicon, parse_caption, triplet_f1
    m.add_input(args.captions)
    m.add_input(args.concepts)
    cs = _concepts(args.concepts)
    lex = Lexicon.from_concepts(cs) if cs is not None else default_lexicon()
    lines, preds, gold = [], [], []
    with open(args.captions, encoding="utf-8") as f:
        for k, line in enumerate(f):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                image_id, caption = rec["image_id"], rec["caption"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise SchemaError(f"line {k + 1}: {exc!r}") from exc
            trips = parse_caption(caption, lex)
            preds.append(trips)
            if "triplets" in rec:
                gold.append([tuple(t) for t in rec["triplets"]])
            lines.append(json.dumps({"image_id": image_id, "caption": caption,
                                     "triplets": [list(t[:3]) for t in trips]}))
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        write_atomic(args.out, text)
        m.add_output(args.out)
    else:
        sys.stdout.write(text)
    m.summary = {"captions": len(preds), "triplets": sum(map(len, preds))}
    if gold and len(gold) == len(preds):
        p, r, f1 = triplet_f1(preds, gold)
        m.summary.update(precision=p, recall=r, f1=f1)
        print(f"triplet precision {p:.3f} recall {r:.3f} F1 {f1:.3f}", file=sys.stderr)


def cmd_ingest_synth(args, m):
    from .weak_supervision import dumps_synthesized, ingest_synthesized
    m.add_input(args.path)
    result = ingest_synthesized(args.path)
    errors = [e._asdict() for e in result.errors]
    write_atomic(args.out, dumps_synthesized(result.records))
    m.add_output(args.out)
    if args.errors:
        write_json(args.errors, {"errors": errors})
        m.add_output(args.errors)
    m.summary = {"records": len(result.records), "rejected": len(errors),
                 "low_trust": sum(r.low_trust_boxes for r in result.records)}
    for e in errors:
        log.warning("record %s (%s) rejected: %s", e["index"], e["image_id"], e["reason"])
    if errors:
        raise DomainFailure(f"{len(errors)} records rejected")


def cmd_prompt(args, m):
    from .prompt import build_prompt
    from .resources import default_concepts
    cfg = merged(args, ["m", "seed", "budget"])
    m.config.update(cfg)
    m.add_input(args.concepts)
    cs = _concepts(args.concepts) or default_concepts()
    positives = [p.strip() for p in (args.positives or "").split(",") if p.strip()]
    m.seed = int(cfg.get("seed", 0))
    p = build_prompt(positives, cs, int(cfg.get("m", 80)), m.seed, int(cfg.get("budget", 256)))
    if args.out:
        write_atomic(args.out + ".txt", p.text + "\n")
        write_atomic(args.out + ".json", p.dumps())
        m.add_output(args.out + ".txt")
        m.add_output(args.out + ".json")
    else:
        print(p.text)
    m.summary = {"positives": len(p.positives), "negatives": len(p.negatives)}


WORLD_KEYS = ["n_objects", "n_relations", "dim", "hidden", "nodes_per_scene", "feature_noise",
              "text_sharing", "n_pretrain", "n_finetune", "n_test", "pretrain_steps",
              "pretrain_step_size", "label_noise", "neg_ratio"]


def cmd_finetune(args, m):
    from .alignment import RelationHeadParams
    from .retention import DistillConfig, SyntheticWorld, finetune
    cfg = merged(args, ["lambda_", "steps", "step_size", "seed", "eval_every", "top_k"])
    m.config.update(cfg)
    seed = int(cfg.get("seed", 0))
    m.seed = seed
    world = SyntheticWorld(seed=seed, **{k: cfg[k] for k in WORLD_KEYS if k in cfg})
    if args.teacher:
        m.add_input(args.teacher)
        teacher = RelationHeadParams.load(args.teacher)
    else:
        teacher = world.pretrain_teacher()
    dc = DistillConfig(teacher, lambda_=float(cfg.get("lambda_", 0.1)),
                       step_size=float(cfg.get("step_size", 0.02)),
                       steps=int(cfg.get("steps", 300)), seed=seed,
                       eval_every=int(cfg.get("eval_every", 100)),
                       top_k=int(cfg.get("top_k", 50)))
    result = finetune(world, dc)
    out = args.out_dir
    traj = [p._asdict() for p in result.trajectory]
    write_json(os.path.join(out, "trajectory.json"), {"config": dc.snapshot(), "trajectory": traj})
    write_atomic(os.path.join(out, "teacher.json"), json.dumps(result.teacher.to_json()) + "\n")
    write_atomic(os.path.join(out, "student.json"), json.dumps(result.student.to_json()) + "\n")
    for name in ("trajectory.json", "teacher.json", "student.json"):
        m.add_output(os.path.join(out, name))
    first, last = result.trajectory[0], result.trajectory[-1]
    m.summary = {"initial": first._asdict(), "final": last._asdict()}
    print(f"base {first.base_recall:.3f} -> {last.base_recall:.3f}   "
          f"novel {first.novel_recall:.3f} -> {last.novel_recall:.3f}")


def cmd_evaluate(args, m):
    from .evaluation import PARTITIONS, EvalConfig, evaluate, format_table
    from .matching import SimilarityWeights
    from .splits import SplitSpec
    cfg = merged(args, ["protocol", "iou_threshold", "max_objects", "micro", "partitions", "ks"])
    m.config.update(cfg)
    for p in (args.gt, args.pred, args.split, args.concepts):
        m.add_input(p)
    gt, pred = load_dataset(args.gt), load_dataset(args.pred)
    spec = SplitSpec.load(args.split) if args.split else SplitSpec("closed")
    cs = _concepts(args.concepts)
    partitions = cfg.get("partitions") or list(PARTITIONS)
    if isinstance(partitions, str):
        partitions = partitions.split(",")
    weights = SimilarityWeights(**cfg["match_weights"]) if "match_weights" in cfg \
        else SimilarityWeights()
    base = EvalConfig(tuple(cfg.get("ks", (20, 50, 100))), float(cfg.get("iou_threshold", 0.5)),
                      cfg.get("protocol", "sgdet"), "base_plus_novel",
                      int(cfg.get("max_objects", 100)), bool(cfg.get("micro", False)), weights)
    reports = [evaluate(gt, pred, spec, base.with_partition(p), cs) for p in partitions]
    out = args.out_dir
    write_json(os.path.join(out, "report.json"), {"reports": [r.to_json() for r in reports]})
    write_atomic(os.path.join(out, "table.txt"), format_table(reports))
    m.add_output(os.path.join(out, "report.json"))
    m.add_output(os.path.join(out, "table.txt"))
    m.summary = {r.partition: {"n_images": r.n_images, "recall": r.recall} for r in reports}
    sys.stdout.write(format_table(reports))


def cmd_report(args, m):
    from .evaluation import EvalReport, format_table
    m.add_input(args.path)
    with open(args.path) as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{args.path} is not JSON: {exc}") from exc
    if "reports" in obj:
        reports = []
        for r in obj["reports"]:
            rep = EvalReport(r["partition"], r["protocol"], r["n_images"])
            rep.recall = {int(k): v for k, v in r["recall"].items()}
            rep.mean_recall = {int(k): v for k, v in r["mean_recall"].items()}
            reports.append(rep)
        sys.stdout.write(format_table(reports))
    elif "trajectory" in obj:
        print(f"{'step':>6} {'base':>7} {'novel':>7} {'all':>7}")
        for p in obj["trajectory"]:
            print(f"{p['step']:>6} {p['base_recall']:7.4f} {p['novel_recall']:7.4f} "
                  f"{p['base_plus_novel_recall']:7.4f}")
    else:
        raise SchemaError("expected an evaluation report or a fine-tuning trajectory")


# --- wiring -----------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="ovscene", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("--manifest", help="run manifest path (default: inside the output location)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a dataset file against the graph invariants")
    p.add_argument("dataset")
    p.add_argument("--concepts")
    p.add_argument("--out")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("split", help="build a Closed/OvD/OvR/OvD+R training split")
    p.add_argument("dataset")
    p.add_argument("--setting", choices=["closed", "ovd", "ovr", "ovd_r"])
    p.add_argument("--seed", type=int)
    p.add_argument("--split-file")
    p.add_argument("--concepts")
    p.add_argument("--config")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("parse-captions", help="extract triplets from a JSON-lines caption file")
    p.add_argument("captions")
    p.add_argument("--concepts")
    p.add_argument("--out")
    p.set_defaults(func=cmd_parse_captions)

    p = sub.add_parser("ingest-synth", help="normalize externally synthesized scene graphs")
    p.add_argument("path")
    p.add_argument("--out", required=True)
    p.add_argument("--errors", help="write the per-record error report here")
    p.set_defaults(func=cmd_ingest_synth)

    p = sub.add_parser("prompt", help="build an object/relation text prompt")
    p.add_argument("--positives", help="comma-separated names")
    p.add_argument("--concepts")
    p.add_argument("--m", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--budget", type=int)
    p.add_argument("--config")
    p.add_argument("--out", help="output prefix; writes PREFIX.txt and PREFIX.json")
    p.set_defaults(func=cmd_prompt)

    p = sub.add_parser("finetune", help="teacher-student fine-tuning in the synthetic world")
    p.add_argument("--config", help="JSON with world and run settings")
    p.add_argument("--lambda", dest="lambda_", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--step-size", dest="step_size", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--teacher", help="start from this checkpoint instead of pre-training")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="R@K / mR@K of predictions against ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--split")
    p.add_argument("--concepts")
    p.add_argument("--config")
    p.add_argument("--protocol", choices=["sgdet", "predcls"])
    p.add_argument("--iou-threshold", dest="iou_threshold", type=float)
    p.add_argument("--max-objects", dest="max_objects", type=int)
    p.add_argument("--micro", action="store_true", default=None)
    p.add_argument("--partitions", help="comma-separated partition names")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="print an evaluation report or trajectory as a table")
    p.add_argument("path")
    p.set_defaults(func=cmd_report)
    return ap


def _manifest_path(args):
    if args.manifest:
        return args.manifest
    if getattr(args, "out_dir", None):
        return os.path.join(args.out_dir, "manifest.json")
    if getattr(args, "out", None):
        return args.out + ".manifest.json"
    return None


def _config_snapshot(args):
    return {k: v for k, v in vars(args).items()
            if k not in ("func", "manifest", "verbose") and v is not None}


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    manifest = RunManifest(args.command, _config_snapshot(args))
    path = _manifest_path(args)
    code = EXIT_OK
    try:
        manifest.write(path)
        threads = os.environ.get("OVSCENE_THREADS")
        if threads:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(int(threads)):
                args.func(args, manifest)
        else:
            args.func(args, manifest)
    except DomainFailure as exc:
        print(f"ovscene {args.command}: {exc}", file=sys.stderr)
        code = EXIT_DOMAIN
    except (ContractError, FloatingPointError) as exc:
        print(f"ovscene {args.command}: {exc}", file=sys.stderr)
        code = EXIT_DOMAIN
    except (OSError, SchemaError) as exc:
        print(f"ovscene {args.command}: {exc}", file=sys.stderr)
        code = EXIT_IO
    try:
        manifest.finalize(path, code)
    except OSError as exc:
        print(f"ovscene: could not write manifest: {exc}", file=sys.stderr)
        code = code or EXIT_IO
    return code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
