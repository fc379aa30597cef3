"""Command line front end tying the library together.

Subcommands cover the whole workflow: carving balanced vocabularies
(build-dataset), fitting one probe per activation layer (train), scoring
probes (eval), fitting growth curves across training checkpoints
(emergence), drawing 2-D projections (visualize), and comparing probe
pairs across layers (analyze).

Each command takes a TOML or JSON config plus a few flags, and every
output is deterministic given config and seed: rerunning into a clean
directory reproduces byte-identical CSV, JSON, and SVG.  To keep that
promise outputs never embed timestamps or absolute paths, floats go
through one fixed format, and each file opens with a provenance header
carrying the toolkit version, the config digest, and input file digests.

Exit codes: 0 success, 1 validation error, 2 partial failure (some
layers trained, some failed).
"""

from __future__ import annotations

import csv
import glob as globmod
import hashlib
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import click
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # 3.10
    import tomli as tomllib

from . import __version__
from .analysis import (
    AnalysisError,
    data_gap,
    emergence_point,
    fit_emergence,
    incremental_r2,
    joint_outliers,
    probe_unit_norms,
    relative_scores,
    subspace_alignment,
    variance_partition,
)
from .dataset import (
    SplitAssignment,
    carve_validation,
    filter_vocabulary,
    load_lexicon,
    load_split,
    sa_split,
    unisemic_wordlist,
)
from .gold import (
    bundled_vowel_features,
    category_members,
    load_edge_tsv,
    load_feature_csv,
    parse_conllu,
)
from .metrics import (
    EvalGrouping,
    category_centroids,
    decode_uuas,
    eval_distance_probe,
    mst,
    pairwise_sq_distances,
    rank_score,
)
from .probe import (
    GraphGold,
    PhonemeGold,
    Probe,
    SentenceGold,
    TrainConfig,
    grid_search,
    load_probe,
    save_probe,
    train_probe,
)
from .tensor_io import read_tensor

TASKS = ("phoneme", "semantic", "syntax")
OBJECTIVES = ("distance", "contrastive")

# metrics where a smaller aggregate is the better one
LOWER_IS_BETTER = {"rank"}


# ---------------------------------------------------------------------------
# provenance and deterministic writers


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class Provenance:
    """Digests of everything a command read, stamped onto everything it wrote."""

    config_digest: str
    inputs: dict[str, str] = field(default_factory=dict)

    def add(self, path) -> None:
        # keyed by basename so the header does not leak working directories
        self.inputs[os.path.basename(str(path))] = _sha256(path)

    def comment_lines(self) -> list[str]:
        lines = [
            f"# geoprobe {__version__}",
            f"# config sha256:{self.config_digest}",
        ]
        for name in sorted(self.inputs):
            lines.append(f"# input {name} sha256:{self.inputs[name]}")
        return lines

    def to_dict(self) -> dict:
        return {
            "toolkit_version": __version__,
            "config_sha256": self.config_digest,
            "inputs": {k: self.inputs[k] for k in sorted(self.inputs)},
        }


def _atomic_bytes(path, data: bytes) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return "%.12g" % v
    return str(v)


def write_csv(path, header: list[str], rows, prov: Provenance) -> None:
    buf = io.StringIO()
    for line in prov.comment_lines():
        buf.write(line + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    _atomic_bytes(path, buf.getvalue().encode("utf-8"))


def write_json(path, payload: dict, prov: Provenance) -> None:
    body = {"provenance": prov.to_dict()}
    body.update(payload)
    text = json.dumps(body, sort_keys=True, indent=1, allow_nan=False)
    _atomic_bytes(path, (text + "\n").encode("utf-8"))


def write_svg(path, body_lines: list[str], prov: Provenance, width: int, height: int) -> None:
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">'
    ]
    for c in prov.comment_lines():
        lines.append(f"<!-- {c[2:]} -->")
    lines.append(f'<rect width="{width}" height="{height}" fill="#ffffff"/>')
    lines.extend(body_lines)
    lines.append("</svg>")
    _atomic_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    """Everything a command needs, flattened out of the config file."""

    task: str = "syntax"
    objective: str = "distance"
    seed: int = 0
    jobs: int = 1
    out: str = ""
    activations: str | None = None
    gold: str | None = None
    labels: str | None = None
    split: str | None = None
    sections: dict = field(default_factory=dict)
    digest: str = ""

    def section(self, name: str) -> dict:
        sec = self.sections.get(name, {})
        if not isinstance(sec, dict):
            raise click.ClickException(f"config section [{name}] must be a table")
        return sec


def load_config(path, seed=None, jobs=None, out=None) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw_bytes = fh.read()
    except OSError as err:
        raise click.ClickException(f"cannot read config: {err}")
    digest = hashlib.sha256(raw_bytes).hexdigest()
    try:
        if str(path).endswith(".json"):
            raw = json.loads(raw_bytes.decode("utf-8"))
        else:
            raw = tomllib.loads(raw_bytes.decode("utf-8"))
    except (ValueError, tomllib.TOMLDecodeError) as err:
        raise click.ClickException(f"config parse error: {err}")
    if not isinstance(raw, dict):
        raise click.ClickException("config must be a table at top level")

    cfg = RunConfig(digest=digest)
    scalars = {
        "task": str,
        "objective": str,
        "seed": int,
        "jobs": int,
        "out": str,
        "activations": str,
        "gold": str,
        "labels": str,
        "split": str,
    }
    for key, value in raw.items():
        if isinstance(value, dict):
            cfg.sections[key] = value
        elif key in scalars:
            setattr(cfg, key, scalars[key](value))
        else:
            raise click.ClickException(f"unknown config key {key!r}")

    if seed is not None:
        cfg.seed = int(seed)
    if jobs is not None:
        cfg.jobs = int(jobs)
    if out is not None:
        cfg.out = str(out)

    if cfg.task not in TASKS:
        raise click.ClickException(f"task must be one of {TASKS}, got {cfg.task!r}")
    if cfg.objective not in OBJECTIVES:
        raise click.ClickException(
            f"objective must be one of {OBJECTIVES}, got {cfg.objective!r}"
        )
    if cfg.jobs < 1:
        raise click.ClickException("jobs must be at least 1")

    for key in ("gold", "labels", "split"):
        p = getattr(cfg, key)
        if p and p != "bundled" and not os.path.exists(p):
            raise click.ClickException(f"{key} file does not exist: {p}")

    # gold format must match the task before any heavy work starts
    if cfg.gold and cfg.gold != "bundled":
        if cfg.task == "syntax" and not cfg.gold.endswith(".conllu"):
            raise click.ClickException("syntax gold must be a .conllu file")
        if cfg.task == "semantic" and not cfg.gold.endswith(".tsv"):
            raise click.ClickException("semantic gold must be an edge .tsv file")
    if cfg.task == "phoneme" and cfg.labels is None and cfg.gold is not None:
        raise click.ClickException("phoneme task needs a labels file (element -> symbol)")
    return cfg


def _require_out(cfg: RunConfig) -> str:
    if not cfg.out:
        raise click.ClickException("no output directory: set 'out' in the config or pass --out")
    os.makedirs(cfg.out, exist_ok=True)
    return cfg.out


def train_config_from(cfg: RunConfig) -> TrainConfig:
    sec = dict(cfg.section("probe"))
    allowed = {
        "probe_dim",
        "learning_rate",
        "epochs",
        "init_scale",
        "batch_spec",
        "negatives_per_anchor",
    }
    unknown = set(sec) - allowed
    if unknown:
        raise click.ClickException(f"unknown [probe] keys: {sorted(unknown)}")
    if "batch_spec" not in sec:
        sec["batch_spec"] = (
            "300 sentences" if cfg.task == "syntax" else "64 sets of 12 words"
        )
    try:
        return TrainConfig(objective=cfg.objective, seed=cfg.seed, **sec)
    except ValueError as err:
        raise click.ClickException(f"bad [probe] config: {err}")


# ---------------------------------------------------------------------------
# shared loading steps


def load_gold(cfg: RunConfig, prov: Provenance):
    """Task-appropriate gold adapter plus the raw parsed structure."""
    try:
        if cfg.task == "syntax":
            if not cfg.gold:
                raise click.ClickException("syntax task needs a gold .conllu file")
            with open(cfg.gold, encoding="utf-8") as fh:
                sentences = parse_conllu(fh.read())
            prov.add(cfg.gold)
            if not sentences:
                raise click.ClickException("gold file holds no sentences")
            return SentenceGold(sentences), sentences
        if cfg.task == "semantic":
            if not cfg.gold:
                raise click.ClickException("semantic task needs a gold edge .tsv file")
            graph = load_edge_tsv(cfg.gold)
            prov.add(cfg.gold)
            return GraphGold(graph), graph
        if cfg.gold and cfg.gold != "bundled":
            table = load_feature_csv(cfg.gold)
            prov.add(cfg.gold)
        else:
            table = bundled_vowel_features()
        if not cfg.labels:
            raise click.ClickException("phoneme task needs a labels file (element -> symbol)")
        with open(cfg.labels, encoding="utf-8") as fh:
            labels = json.load(fh)
        prov.add(cfg.labels)
        if not isinstance(labels, dict):
            raise click.ClickException("labels file must map element ids to symbols")
        return PhonemeGold(table, {str(k): str(v) for k, v in labels.items()}), table
    except ValueError as err:
        raise click.ClickException(f"gold load failed: {err}")


def load_activation_files(pattern: str | None, prov: Provenance):
    """Sorted (path, matrix) pairs for a glob; one file per layer."""
    if not pattern:
        raise click.ClickException("no activations glob configured")
    paths = sorted(globmod.glob(pattern))
    if not paths:
        raise click.ClickException(f"no activation files match {pattern!r}")
    out = []
    seen: dict[int, str] = {}
    for p in paths:
        try:
            mat = read_tensor(p)
        except (ValueError, OSError) as err:
            raise click.ClickException(f"{p}: {err}")
        if mat.layer_index in seen:
            raise click.ClickException(
                f"two files claim layer {mat.layer_index}: {seen[mat.layer_index]} and {p}"
            )
        seen[mat.layer_index] = p
        prov.add(p)
        out.append((p, mat))
    return out


def _partition(cfg: RunConfig, ids: list[str], prov: Provenance):
    """(train, validation, test) element lists for one activation matrix."""
    present = set(ids)
    if cfg.split:
        assign = load_split(cfg.split)
        prov.add(cfg.split)
        missing = [e for e in ids if e not in assign.labels]
        if missing:
            raise click.ClickException(
                f"{len(missing)} activation elements missing from the split, "
                f"first few: {missing[:5]}"
            )
    else:
        assign = SplitAssignment(
            labels={e: "train" for e in ids}, test_fraction=0.2
        )
    tr, va = carve_validation(assign, seed=cfg.seed)
    tr = [e for e in tr if e in present]
    va = [e for e in va if e in present]
    te = [e for e in assign.test_elements() if e in present]
    return tr, va, te


def _manifest_probes(path, prov: Provenance) -> dict[int, str]:
    """Layer index -> probe path from a training manifest."""
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, ValueError) as err:
        raise click.ClickException(f"cannot read manifest {path}: {err}")
    prov.add(path)
    base = os.path.dirname(str(path))
    out: dict[int, str] = {}
    for entry in manifest.get("layers", []):
        if entry.get("status") in ("ok", "skipped") and entry.get("path"):
            out[int(entry["layer_index"])] = os.path.join(base, entry["path"])
    if not out:
        raise click.ClickException(f"manifest {path} lists no usable probes")
    return out


# ---------------------------------------------------------------------------
# command group


@click.group()
@click.version_option(__version__, prog_name="geoprobe")
def main():
    """Geometric probes for structure in network activations."""


# ---------------------------------------------------------------------------
# build-dataset


@main.command("build-dataset")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--out", "out_dir", type=click.Path(), default=None)
def cmd_build_dataset(config_path, seed, out_dir):
    """Carve an unambiguous wordlist and anneal a balanced train/test split."""
    cfg = load_config(config_path, seed=seed, out=out_dir)
    prov = Provenance(cfg.digest)
    sec = cfg.section("dataset")
    if "lexicon" not in sec:
        raise click.ClickException("[dataset] needs a 'lexicon' path")
    if not os.path.exists(sec["lexicon"]):
        raise click.ClickException(f"lexicon file does not exist: {sec['lexicon']}")
    out = _require_out(cfg)

    try:
        lex = load_lexicon(sec["lexicon"])
    except (ValueError, KeyError) as err:
        raise click.ClickException(f"bad lexicon: {err}")
    prov.add(sec["lexicon"])

    graph = None
    if sec.get("graph"):
        try:
            graph = load_edge_tsv(sec["graph"])
        except ValueError as err:
            raise click.ClickException(f"bad graph: {err}")
        prov.add(sec["graph"])

    words = unisemic_wordlist(lex, graph)
    if sec.get("allowed"):
        with open(sec["allowed"], encoding="utf-8") as fh:
            allowed = {line.strip() for line in fh if line.strip()}
        prov.add(sec["allowed"])
        words = filter_vocabulary(words, allowed)
    if not words:
        raise click.ClickException("no unambiguous words survive the filters")

    # categories steer the annealer; a catch-all keeps every synset in play
    cats: dict[str, set[str]] = {"all": set(words)}
    if graph is not None:
        roots = sec.get("category_roots")
        if roots is None:
            roots = sorted(n for n in graph.nodes if graph.hyponyms_of(n))
        for r in roots:
            members = category_members(graph, r) & set(words)
            if members:
                cats[r] = members

    names = sorted(cats)
    assign = sa_split(
        [cats[n] for n in names],
        test_fraction=float(sec.get("test_fraction", 0.2)),
        iterations=int(sec.get("iterations", 1_000_000)),
        cooling=float(sec.get("cooling", 0.999995)),
        seed=cfg.seed,
    )

    write_csv(
        os.path.join(out, "wordlist.csv"),
        ["synset_id", "lemma"],
        [(sid, words[sid]) for sid in sorted(words)],
        prov,
    )
    write_json(
        os.path.join(out, "split.json"),
        {
            "labels": assign.labels,
            "test_fraction": assign.test_fraction,
            "final_cost": assign.final_cost,
            "cost_trace": [[int(s), float(c)] for s, c in assign.cost_trace],
        },
        prov,
    )
    fractions = assign.category_fractions(cats)
    write_csv(
        os.path.join(out, "category_fractions.csv"),
        ["category", "n_members", "test_fraction"],
        [(n, len(cats[n]), fractions[n]) for n in names],
        prov,
    )
    first = assign.cost_trace[0][1] if assign.cost_trace else float("nan")
    click.echo(
        f"{len(words)} words, {len(names)} categories, "
        f"cost {first:.3g} -> {assign.final_cost:.3g}"
    )


# ---------------------------------------------------------------------------
# train


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--jobs", type=int, default=None, help="Layers trained in parallel.")
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--grid", "use_grid", is_flag=True, help="Sweep learning rates per layer.")
@click.option("--resume", is_flag=True, help="Skip layers whose probe file exists.")
@click.pass_context
def cmd_train(ctx, config_path, seed, jobs, out_dir, use_grid, resume):
    """Fit one probe per activation layer and write a manifest."""
    cfg = load_config(config_path, seed=seed, jobs=jobs, out=out_dir)
    prov = Provenance(cfg.digest)
    out = _require_out(cfg)
    gold, _ = load_gold(cfg, prov)
    files = load_activation_files(cfg.activations, prov)
    base_cfg = train_config_from(cfg)
    if cfg.split:
        # pre-register so per-layer outputs see identical provenance no
        # matter which worker thread writes first
        prov.add(cfg.split)

    def _finite(v):
        return float(v) if v is not None and np.isfinite(v) else None

    def run_layer(path, mat):
        layer = mat.layer_index
        name = f"probe_layer{layer:04d}.act"
        dest = os.path.join(out, name)
        entry: dict = {"layer_index": layer, "path": name, "status": "ok"}
        if resume and os.path.exists(dest):
            probe = load_probe(dest)
            entry["status"] = "skipped"
            entry["final_val_loss"] = _finite(probe.final_val_loss)
            entry["final_train_loss"] = _finite(probe.final_train_loss)
            return entry
        tr, va, _ = _partition(cfg, list(mat.element_ids), prov)
        if use_grid:
            result = grid_search(base_cfg, mat, gold, (tr, va))
            grid_name = f"grid_layer{layer:04d}.csv"
            write_csv(
                os.path.join(out, grid_name),
                ["learning_rate", "val_loss", "train_loss"],
                [
                    (r["learning_rate"], r["val_loss"], r["train_loss"])
                    for r in result.table
                ],
                prov,
            )
            probe = result.best_probe
            entry["grid_path"] = grid_name
            entry["learning_rate"] = result.best_config.learning_rate
        else:
            probe, _history = train_probe(base_cfg, mat, gold, (tr, va))
            entry["learning_rate"] = base_cfg.learning_rate
        # two-file artifact, so stage both and swap them in together
        save_probe(probe, dest + ".tmp")
        os.replace(dest + ".tmp", dest)
        os.replace(dest + ".tmp.json", dest + ".json")
        entry["final_val_loss"] = _finite(probe.final_val_loss)
        entry["final_train_loss"] = _finite(probe.final_train_loss)
        return entry

    entries = []
    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            futures = [(mat.layer_index, pool.submit(run_layer, p, mat)) for p, mat in files]
            for layer, fut in futures:
                try:
                    entries.append(fut.result())
                except Exception as err:
                    entries.append(
                        {"layer_index": layer, "status": "failed",
                         "error": f"{type(err).__name__}: {err}"}
                    )
    else:
        for p, mat in files:
            try:
                entries.append(run_layer(p, mat))
            except Exception as err:
                entries.append(
                    {"layer_index": mat.layer_index, "status": "failed",
                     "error": f"{type(err).__name__}: {err}"}
                )

    entries.sort(key=lambda e: e["layer_index"])
    write_json(
        os.path.join(out, "manifest.json"),
        {
            "task": cfg.task,
            "objective": cfg.objective,
            "probe_dim": base_cfg.probe_dim,
            "layers": entries,
        },
        prov,
    )
    failed = [e for e in entries if e["status"] == "failed"]
    for e in entries:
        tag = e["status"]
        extra = e.get("error", "") if tag == "failed" else _fmt(e.get("final_val_loss"))
        click.echo(f"layer {e['layer_index']}: {tag} {extra}".rstrip())
    if failed:
        click.echo(f"{len(failed)} of {len(entries)} layers failed", err=True)
        ctx.exit(2)


# ---------------------------------------------------------------------------
# eval


def _rank_report_groups(probe, mat, gold, elements, min_group):
    """Per-element neighbor ranks; pooled across groups for one median."""
    row = mat.row_index()
    h = mat.data.astype(np.float64)
    scores: dict[str, float] = {}
    sizes: dict[str, int] = {}
    skipped = 0
    if getattr(gold, "mode", "sets") == "sentences":
        for group in gold.groups(set(elements)):
            if len(group) < min_group:
                continue
            rows = np.array([row[e] for e in group])
            d = pairwise_sq_distances(h[rows] @ probe.B)
            per, _ = rank_score(d, gold.group_neighbors(group))
            for e, r in zip(group, per):
                if np.isnan(r):
                    skipped += 1
                else:
                    scores[e] = float(r)
                    sizes[e] = 1
    else:
        ids = gold.universe(set(elements))
        if len(ids) >= 2:
            pos_index = {e: i for i, e in enumerate(ids)}
            rows = np.array([row[e] for e in ids])
            d = pairwise_sq_distances(h[rows] @ probe.B)
            positives = [
                [pos_index[n] for n in gold.neighbors(e) if n in pos_index]
                for e in ids
            ]
            per, _ = rank_score(d, positives)
            for e, r in zip(ids, per):
                if np.isnan(r):
                    skipped += 1
                else:
                    scores[e] = float(r)
                    sizes[e] = 1
    from .metrics import EvalReport

    return EvalReport(
        metric="rank",
        grouping=getattr(gold, "mode", "sets"),
        group_scores=scores,
        group_sizes=sizes,
        aggregate_kind="median",
        skipped_groups=skipped,
        layer_index=mat.layer_index,
        checkpoint_words=mat.checkpoint_words,
        source_model=mat.source_model,
    )


def _random_probe(k: int, p: int, seed: int) -> Probe:
    rng = np.random.default_rng(seed)
    return Probe(B=rng.standard_normal((k, p)) / np.sqrt(k), probe_dim=p)


def _layer_reports(cfg, probe, mat, gold, sentences, elements, grouping):
    reports = {"spearman": eval_distance_probe(probe, mat, gold, elements, grouping)}
    if cfg.task == "syntax":
        reports["uuas"] = decode_uuas(probe, mat, sentences, elements)
        reports["rank"] = _rank_report_groups(probe, mat, gold, elements, grouping.min_group)
    elif cfg.objective == "contrastive":
        reports["rank"] = _rank_report_groups(probe, mat, gold, elements, grouping.min_group)
    return reports


@main.command("eval")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--baseline", is_flag=True, help="Score a random probe alongside.")
def cmd_eval(config_path, seed, out_dir, baseline):
    """Score trained probes layer by layer and pick the best layer."""
    cfg = load_config(config_path, seed=seed, out=out_dir)
    prov = Provenance(cfg.digest)
    out = _require_out(cfg)
    sec = cfg.section("eval")
    if "probes" not in sec:
        raise click.ClickException("[eval] needs a 'probes' manifest path")
    gold, parsed = load_gold(cfg, prov)
    sentences = parsed if cfg.task == "syntax" else None
    probes = _manifest_probes(sec["probes"], prov)
    files = load_activation_files(cfg.activations, prov)

    layer_set = sorted(mat.layer_index for _, mat in files)
    num_layers = int(sec.get("num_layers", max(layer_set) + 1))
    denom = max(num_layers - 1, 1)

    rows = []
    best: dict[str, tuple[int, float]] = {}
    for path, mat in files:
        layer = mat.layer_index
        if layer not in probes:
            click.echo(f"warning: no probe for layer {layer}, skipping", err=True)
            continue
        probe = load_probe(probes[layer])
        prov.add(probes[layer])
        if os.path.exists(probes[layer] + ".json"):
            prov.add(probes[layer] + ".json")
        elements = [e for e in mat.element_ids]
        if cfg.split:
            _, _, test = _partition(cfg, elements, prov)
            elements = test
        if not elements:
            raise click.ClickException(f"layer {layer}: no test elements to score")
        grouping = EvalGrouping(
            mode="sentences" if cfg.task == "syntax" else "sets",
            set_size=int(sec.get("set_size", 12)),
            seed=cfg.seed,
            min_group=int(sec.get("min_group", 3)),
        )
        variants: list[tuple[str, Probe]] = [("probe", probe)]
        if baseline:
            variants.append(
                ("baseline", _random_probe(mat.k, probe.probe_dim, cfg.seed))
            )
        for name, pr in variants:
            reports = _layer_reports(cfg, pr, mat, gold, sentences, elements, grouping)
            for metric in sorted(reports):
                rep = reports[metric]
                agg = rep.aggregate
                rows.append(
                    (
                        name,
                        layer,
                        layer / denom,
                        mat.checkpoint_words,
                        metric,
                        agg,
                        len(rep.group_scores),
                        rep.n_elements,
                        rep.skipped_groups,
                    )
                )
                if name == "probe" and agg is not None:
                    lower = metric in LOWER_IS_BETTER
                    cur = best.get(metric)
                    # strict comparison keeps the shallowest layer on ties
                    if cur is None or (agg < cur[1] if lower else agg > cur[1]):
                        best[metric] = (layer, agg)

    if not rows:
        raise click.ClickException("no layer had both activations and a probe")
    write_csv(
        os.path.join(out, "layers.csv"),
        [
            "probe_name",
            "layer_index",
            "relative_depth",
            "checkpoint_words",
            "metric",
            "aggregate",
            "n_groups",
            "n_elements",
            "skipped_groups",
        ],
        rows,
        prov,
    )
    write_json(
        os.path.join(out, "best_layer.json"),
        {
            "metrics": {
                m: {
                    "layer_index": best[m][0],
                    "relative_depth": best[m][0] / denom,
                    "score": best[m][1],
                    "direction": "min" if m in LOWER_IS_BETTER else "max",
                }
                for m in sorted(best)
            },
            "num_layers": num_layers,
        },
        prov,
    )
    for m in sorted(best):
        click.echo(f"{m}: layer {best[m][0]} score {_fmt(best[m][1])}")


# ---------------------------------------------------------------------------
# emergence


def _read_eval_csv(path):
    """Rows of a layers.csv written by cmd_eval, header keyed."""
    with open(path, encoding="utf-8", newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    if not rows:
        raise click.ClickException(f"{path}: empty eval csv")
    header = rows[0]
    return [dict(zip(header, r)) for r in rows[1:]]


@main.command("emergence")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", "out_dir", type=click.Path(), default=None)
def cmd_emergence(config_path, out_dir):
    """Fit growth curves over checkpoints and locate emergence points."""
    cfg = load_config(config_path, out=out_dir)
    prov = Provenance(cfg.digest)
    out = _require_out(cfg)
    sec = cfg.section("emergence")
    structures = sec.get("structures")
    if not structures:
        raise click.ClickException("[emergence.structures] must map names to eval csv globs")
    level = float(sec.get("level", 0.5))
    child_words = float(sec.get("child_words_per_year", 1e7))
    grid_points = int(sec.get("grid_points", 50))
    metrics_cfg = sec.get("metrics", {})

    summary: dict[str, dict] = {}
    rel_rows = []
    for name in sorted(structures):
        pattern = structures[name]
        metric = str(metrics_cfg.get(name, "spearman"))
        lower = metric in LOWER_IS_BETTER
        paths = sorted(globmod.glob(pattern))
        if not paths:
            raise click.ClickException(f"structure {name!r}: no files match {pattern!r}")
        points: dict[int, float] = {}
        for p in paths:
            prov.add(p)
            for row in _read_eval_csv(p):
                if row.get("metric") != metric or row.get("probe_name") != "probe":
                    continue
                if row.get("aggregate") in (None, ""):
                    continue
                if row.get("checkpoint_words") in (None, ""):
                    raise click.ClickException(
                        f"{p}: rows carry no checkpoint_words; emergence needs "
                        "activations dumped with cumulative word counts"
                    )
                words = int(row["checkpoint_words"])
                score = float(row["aggregate"])
                if words not in points:
                    points[words] = score
                elif (score < points[words]) if lower else (score > points[words]):
                    points[words] = score
        if len(points) == 1:
            raise click.ClickException(
                f"structure {name!r} has a single checkpoint; curve fitting needs "
                "at least four checkpoints spanning the growth range, so run eval "
                "on more checkpoints first"
            )
        if len(points) < 4:
            raise click.ClickException(
                f"structure {name!r} has {len(points)} checkpoints; need at least 4"
            )
        pairs = [
            (float(w), -points[w] if lower else points[w]) for w in sorted(points)
        ]  # growth curves expect higher = better
        try:
            curve = fit_emergence(pairs)
        except AnalysisError as err:
            raise click.ClickException(f"structure {name!r}: {err}")
        words = np.array(sorted(points), dtype=np.float64)

        entry: dict = {
            "metric": metric,
            "n_checkpoints": len(points),
            "points": [[int(w), float(points[w])] for w in sorted(points)],
            "a": curve.a,
            "b": curve.b,
            "mu": curve.mu,
            "sigma": curve.sigma,
            "residual": curve.residual,
            "degenerate": curve.degenerate,
            "emergence": None,
            "data_gap": None,
        }
        if not curve.degenerate:
            point = emergence_point(curve, level)
            entry["emergence"] = {
                "level": level,
                "words": point.words,
                "log10_words": float(np.log10(point.words)),
                "extrapolated": point.extrapolated,
            }
            entry["data_gap"] = data_gap(point.words, child_words)
            xs = np.linspace(
                float(np.log10(words.min())), float(np.log10(words.max())), grid_points
            )
            rel = relative_scores(curve, xs)
            for x, r in zip(xs, rel):
                rel_rows.append((name, x, r))
        summary[name] = entry

    write_json(
        os.path.join(out, "emergence.json"),
        {
            "level": level,
            "child_words_per_year": child_words,
            "structures": summary,
        },
        prov,
    )
    write_csv(
        os.path.join(out, "relative_scores.csv"),
        ["structure", "log10_words", "relative_score"],
        rel_rows,
        prov,
    )
    for name in sorted(summary):
        e = summary[name]
        if e["degenerate"]:
            click.echo(f"{name}: flat curve, no emergence point")
        else:
            tag = " (extrapolated)" if e["emergence"]["extrapolated"] else ""
            click.echo(
                f"{name}: mu=10^{e['mu']:.2f} words, emergence at "
                f"{e['emergence']['words']:.3g} words{tag}, "
                f"gap {e['data_gap']:.2f} dex"
            )


# ---------------------------------------------------------------------------
# visualize


def _pixel_map(values: np.ndarray, lo: float, hi: float, flip: bool = False):
    span = values.max() - values.min()
    if span <= 0:
        return np.full(values.shape, (lo + hi) / 2.0)
    unit = (values - values.min()) / span
    if flip:
        unit = 1.0 - unit
    return lo + unit * (hi - lo)


@main.command("visualize")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--tree", "tree_sentence", default=None,
              help="Restrict to one sentence and overlay its decoded tree.")
def cmd_visualize(config_path, out_dir, tree_sentence):
    """Draw the 2-D projection of a probe as an SVG scatter."""
    cfg = load_config(config_path, out=out_dir)
    prov = Provenance(cfg.digest)
    out = _require_out(cfg)
    sec = cfg.section("visualize")
    if "probe" not in sec:
        raise click.ClickException("[visualize] needs a 'probe' path")
    if not os.path.exists(sec["probe"]):
        raise click.ClickException(f"probe file does not exist: {sec['probe']}")
    probe = load_probe(sec["probe"])
    prov.add(sec["probe"])
    if probe.probe_dim != 2:
        raise click.ClickException(
            f"scatter needs a 2-dimensional probe, got {probe.probe_dim}"
        )
    pattern = sec.get("activations", cfg.activations)
    files = load_activation_files(pattern, prov)
    if len(files) != 1:
        raise click.ClickException(
            f"visualize wants exactly one activation file, glob matched {len(files)}"
        )
    _, mat = files[0]

    ids = list(mat.element_ids)
    edges: list[tuple[int, int]] = []
    if tree_sentence is not None:
        if cfg.task != "syntax":
            raise click.ClickException("--tree only makes sense for the syntax task")
        _, sentences = load_gold(cfg, prov)
        match = [s for s in sentences if s.sentence_id == tree_sentence]
        if not match:
            raise click.ClickException(f"sentence {tree_sentence!r} not in the gold file")
        sent = match[0]
        ids = [SentenceGold.element_id(sent.sentence_id, t) for t in sent.token_ids]
        missing = [e for e in ids if e not in set(mat.element_ids)]
        if missing:
            raise click.ClickException(
                f"sentence tokens missing from activations: {missing[:5]}"
            )

    row = mat.row_index()
    coords = mat.data[np.array([row[e] for e in ids])].astype(np.float64) @ probe.B
    if tree_sentence is not None:
        edges = sorted(mst(pairwise_sq_distances(coords)))

    write_csv(
        os.path.join(out, "coords.csv"),
        ["element_id", "x", "y"],
        [(e, coords[i, 0], coords[i, 1]) for i, e in enumerate(ids)],
        prov,
    )

    width = int(sec.get("width", 640))
    height = int(sec.get("height", 480))
    margin = 40
    px = _pixel_map(coords[:, 0], margin, width - margin)
    py = _pixel_map(coords[:, 1], margin, height - margin, flip=True)

    body: list[str] = []
    for a, b in edges:
        body.append(
            f'<line x1="{px[a]:.2f}" y1="{py[a]:.2f}" x2="{px[b]:.2f}" '
            f'y2="{py[b]:.2f}" stroke="#999999" stroke-width="1"/>'
        )
    for i, e in enumerate(ids):
        body.append(
            f'<circle cx="{px[i]:.2f}" cy="{py[i]:.2f}" r="3" fill="#33667a">'
            f"<title>{escape(e)}</title></circle>"
        )
    if sec.get("categories"):
        with open(sec["categories"], encoding="utf-8") as fh:
            raw_cats = json.load(fh)
        prov.add(sec["categories"])
        cats = {str(k): set(map(str, v)) for k, v in raw_cats.items()}
        try:
            cents = category_centroids(np.stack([px, py], axis=1), ids, cats)
        except ValueError as err:
            raise click.ClickException(f"bad categories: {err}")
        for name in sorted(cents):
            cx, cy = cents[name]
            body.append(
                f'<path d="M {cx:.2f} {cy - 6:.2f} L {cx + 6:.2f} {cy:.2f} '
                f'L {cx:.2f} {cy + 6:.2f} L {cx - 6:.2f} {cy:.2f} Z" '
                f'fill="#cc3333"><title>{escape(name)}</title></path>'
            )
    write_svg(os.path.join(out, "scatter.svg"), body, prov, width, height)
    click.echo(f"{len(ids)} points, {len(edges)} edges")


# ---------------------------------------------------------------------------
# analyze


def _load_univariate(path, ids: list[str], prov: Provenance) -> np.ndarray:
    with open(path, encoding="utf-8", newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    if not rows or rows[0][:1] != ["element_id"]:
        raise click.ClickException(
            f"{path}: univariate table must start with an element_id column"
        )
    prov.add(path)
    try:
        table = {r[0]: [float(v) for v in r[1:]] for r in rows[1:]}
    except ValueError as err:
        raise click.ClickException(f"{path}: non-numeric feature value ({err})")
    missing = [e for e in ids if e not in table]
    if missing:
        raise click.ClickException(
            f"{path}: missing features for {len(missing)} elements, "
            f"first few: {missing[:5]}"
        )
    return np.array([table[e] for e in ids], dtype=np.float64)


@main.command("analyze")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", "out_dir", type=click.Path(), default=None)
def cmd_analyze(config_path, out_dir):
    """Compare semantic and syntactic probes layer by layer."""
    cfg = load_config(config_path, out=out_dir)
    prov = Provenance(cfg.digest)
    out = _require_out(cfg)
    sec = cfg.section("analyze")
    for key in ("semantic_manifest", "syntactic_manifest"):
        if key not in sec:
            raise click.ClickException(f"[analyze] needs a {key!r} path")
    sem_probes = _manifest_probes(sec["semantic_manifest"], prov)
    syn_probes = _manifest_probes(sec["syntactic_manifest"], prov)
    if set(sem_probes) != set(syn_probes):
        only_sem = sorted(set(sem_probes) - set(syn_probes))
        only_syn = sorted(set(syn_probes) - set(sem_probes))
        raise click.ClickException(
            f"manifests cover different layers: semantic only {only_sem}, "
            f"syntactic only {only_syn}"
        )
    threshold = float(sec.get("norm_threshold", 2.0))

    align_rows = []
    norm_rows = []
    counts: dict[str, dict] = {}
    probes: dict[int, tuple[Probe, Probe]] = {}
    for layer in sorted(sem_probes):
        p_sem = load_probe(sem_probes[layer])
        p_syn = load_probe(syn_probes[layer])
        prov.add(sem_probes[layer])
        prov.add(syn_probes[layer])
        if p_sem.input_dim != p_syn.input_dim:
            raise click.ClickException(
                f"layer {layer}: probes disagree on activation width "
                f"({p_sem.input_dim} vs {p_syn.input_dim})"
            )
        probes[layer] = (p_sem, p_syn)
        k = p_sem.input_dim
        try:
            align = subspace_alignment(p_sem.B, p_syn.B)
            n_sem, f_sem = probe_unit_norms(p_sem.B, threshold)
            n_syn, f_syn = probe_unit_norms(p_syn.B, threshold)
        except AnalysisError as err:
            raise click.ClickException(f"layer {layer}: {err}")
        joint = joint_outliers(f_sem, f_syn)
        align_rows.append(
            (
                layer,
                align,
                p_sem.probe_dim,
                p_syn.probe_dim,
                max(p_sem.probe_dim, p_syn.probe_dim) / k,
            )
        )
        for unit in range(k):
            norm_rows.append(
                (
                    layer,
                    unit,
                    n_sem[unit],
                    n_syn[unit],
                    bool(f_sem[unit]),
                    bool(f_syn[unit]),
                    bool(f_sem[unit] and f_syn[unit]),
                )
            )
        counts[str(layer)] = {
            "semantic_outliers": int(f_sem.sum()),
            "syntactic_outliers": int(f_syn.sum()),
            "joint_outliers": int(len(joint)),
            "expected_joint": float(f_sem.sum() * f_syn.sum() / k),
        }
        # one scatter per layer: unit norms under both probes
        margin = 40
        width = height = 480
        px = _pixel_map(n_sem, margin, width - margin)
        py = _pixel_map(n_syn, margin, height - margin, flip=True)
        body = []
        for unit in range(k):
            color = "#cc3333" if (f_sem[unit] and f_syn[unit]) else "#33667a"
            body.append(
                f'<circle cx="{px[unit]:.2f}" cy="{py[unit]:.2f}" r="3" '
                f'fill="{color}"><title>unit {unit}</title></circle>'
            )
        write_svg(
            os.path.join(out, f"norm_scatter_layer{layer:04d}.svg"),
            body,
            prov,
            width,
            height,
        )

    write_csv(
        os.path.join(out, "alignment.csv"),
        ["layer_index", "alignment", "sem_dim", "syn_dim", "expected_random"],
        align_rows,
        prov,
    )
    write_csv(
        os.path.join(out, "norms.csv"),
        ["layer_index", "unit", "sem_norm", "syn_norm", "sem_flag", "syn_flag", "joint_flag"],
        norm_rows,
        prov,
    )

    encoding_rows = []
    delta_rows = []
    flagged: dict[str, list[int]] = {}
    if sec.get("encoding_acts"):
        enc_files = load_activation_files(sec["encoding_acts"], prov)
        outer = int(sec.get("outer", 5))
        inner = int(sec.get("inner", 5))
        max_units = sec.get("max_units")
        univariate = None
        for path, mat in enc_files:
            layer = mat.layer_index
            if layer not in probes:
                raise click.ClickException(
                    f"{path}: layer {layer} has no probe pair to project with"
                )
            p_sem, p_syn = probes[layer]
            if p_sem.input_dim != mat.k:
                raise click.ClickException(
                    f"{path}: activation width {mat.k} does not match probes "
                    f"({p_sem.input_dim})"
                )
            h = mat.data.astype(np.float64)
            x_sem = h @ p_sem.B
            x_syn = h @ p_syn.B
            if sec.get("univariate"):
                univariate = _load_univariate(
                    sec["univariate"], list(mat.element_ids), prov
                )
            n_units = mat.k if max_units is None else min(mat.k, int(max_units))
            for unit in range(n_units):
                y = h[:, unit]
                try:
                    res = variance_partition(
                        x_sem, x_syn, y, outer=outer, inner=inner, unit=str(unit)
                    )
                except AnalysisError:
                    continue  # constant unit, nothing to explain
                coding = res.r2_total > 0.1 and res.r2_syntax >= 0.9 * res.r2_total
                if coding:
                    flagged.setdefault(str(layer), []).append(unit)
                encoding_rows.append(
                    (
                        layer,
                        unit,
                        res.r2_total,
                        res.r2_semantic,
                        res.r2_syntax,
                        res.cross_term,
                        coding,
                    )
                )
                if univariate is not None:
                    delta, r2_joint, r2_uni = incremental_r2(
                        univariate, np.hstack([x_sem, x_syn]), y,
                        outer=outer, inner=inner,
                    )
                    delta_rows.append((layer, unit, delta, r2_joint, r2_uni))
        write_csv(
            os.path.join(out, "encoding.csv"),
            ["layer_index", "unit", "r2_total", "r2_semantic", "r2_syntax",
             "cross_term", "syntax_coding"],
            encoding_rows,
            prov,
        )
        if delta_rows:
            write_csv(
                os.path.join(out, "delta_r2.csv"),
                ["layer_index", "unit", "delta_r2", "r2_joint", "r2_univariate"],
                delta_rows,
                prov,
            )
        else:
            click.echo(
                "no univariate feature table configured; delta R^2 outputs omitted"
            )

    write_json(
        os.path.join(out, "analyze.json"),
        {
            "alignment": {str(l): a for l, a, *_ in align_rows},
            "outlier_counts": counts,
            "syntax_coding_units": {k: sorted(v) for k, v in flagged.items()},
        },
        prov,
    )
    for l, a, *_ in align_rows:
        click.echo(f"layer {l}: alignment {_fmt(a)}")
    for layer, units in sorted(flagged.items()):
        click.echo(f"layer {layer}: syntax-coding units {units}")


if __name__ == "__main__":
    main()
