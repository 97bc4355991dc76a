"""Command line front end: one binary, eight subcommands.

Exit codes: 0 success, 1 a check ran and failed, 2 usage error, 3 internal
invariant violation.  A JSON config file can predefine flag values per
subcommand (top-level keys apply everywhere, a section named after a
subcommand overrides them); explicit flags always win.
"""

from __future__ import annotations

import csv
import functools
import json
import math
import os
import sys
from typing import Dict, List, Optional

import click
import numpy as np

from .cluster import (ClusterError, ensemble_slice_cluster, full_cluster,
                      slice_cluster)
from .graph import (GraphError, ModelFormatError, PolyActNode,
                    build_resnet_graph, load_model, save_model)
from .levels import (DepthExhausted, PlanError, plan_from_json,
                     plan_modulus_chain, walk_schedule)
from .polyfit import FitError, fit_relu_poly
from .simulator import (SimError, perturbed_chain, rescale_error_probe,
                        run_model)
from .trainlab import (TrainConfig, TrainError, TinyMLP, lemma1_check,
                       lemma2_check, make_synthetic, train)
from .transforms import (TransformError, apply_pipeline, check_equivalence,
                         critical_path_levels, reference_eval)

VARIANTS = ("rn18", "rn20", "rn32")
STRATEGIES = ("p4", "p2", "p2f", "p2r", "p2fr")

# Analyzer levels per strategy plus the tight sublevel walk on the fully
# reduced graph; `levels --strategy all` prints these columns.
LEVEL_TABLE_COLUMNS = ("P4", "P2", "P2F", "P2R", "P2FR", "P2FRT")

_DOMAIN_ERRORS = (GraphError, ModelFormatError, PlanError, DepthExhausted,
                  TransformError, ClusterError, TrainError, SimError, FitError)


class CheckFailure(click.ClickException):
    exit_code = 1


def _internal_guard(f):
    @functools.wraps(f)
    def wrapped(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except click.ClickException:
            raise
        except _DOMAIN_ERRORS as exc:
            click.echo(f"internal: {exc}", err=True)
            sys.exit(3)
    return wrapped


def _echo_json(payload: Dict, out: Optional[str]) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out:
        with open(out, "w") as fh:
            fh.write(text + "\n")
        click.echo(f"wrote {out}")
    else:
        click.echo(text)


def _act_for(strategy: str) -> str:
    return "poly4" if strategy == "p4" else "poly2"


def _build_graph(variant: Optional[str], model: Optional[str], seed: int,
                 input_hw: Optional[int], act: str = "poly2"):
    if (variant is None) == (model is None):
        raise click.UsageError("pass exactly one of --variant or --model")
    if model is not None:
        return load_model(model)
    return build_resnet_graph(variant, act=act, seed=seed, input_hw=input_hw)


def _figure(figures: Optional[str], name: str, draw) -> Optional[str]:
    if figures is None:
        return None
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(figures, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    draw(ax)
    path = os.path.join(figures, name)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    click.echo(f"figure {path}")
    return path


def read_input_tensor(path: str) -> np.ndarray:
    """One JSON header line {"shape", "dtype"}, then raw little-endian bytes."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        data = np.frombuffer(fh.read(), dtype=np.dtype(header.get("dtype", "<f8")))
    return data.reshape(header["shape"]).astype(np.float64)


def write_input_tensor(path: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    header = {"shape": list(arr.shape), "dtype": "<f8"}
    with open(path, "wb") as fh:
        fh.write((json.dumps(header) + "\n").encode("utf-8"))
        fh.write(arr.tobytes())


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", type=click.Path(exists=True, dir_okay=False),
              help="JSON file with default flag values; explicit flags win.")
@click.pass_context
def main(ctx: click.Context, config: Optional[str]) -> None:
    """Leveled-inference toolkit: fit activations, compile models, plan
    modulus chains, cluster weights, train, simulate, compare."""
    if config:
        with open(config) as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise click.UsageError("config must be a JSON object")
        shared = {k: v for k, v in raw.items() if not isinstance(v, dict)}
        ctx.default_map = {
            name: {**shared, **(raw.get(name) or {})}
            for name in main.commands
        }


# ---------------------------------------------------------------------------
# fit-poly
# ---------------------------------------------------------------------------


@main.command("fit-poly")
@click.option("--degree", "-d", type=click.IntRange(min=1), default=2,
              show_default=True, help="Polynomial degree.")
@click.option("--clip", "-c", type=float, default=2.0, show_default=True,
              help="Half-width of the fitting interval [-c, c].")
@click.option("--frac-bits", "-b", type=click.IntRange(min=1), default=10,
              show_default=True, help="Fixed-point fractional bits.")
@click.option("--out", type=click.Path(dir_okay=False), default=None,
              help="Write the JSON report here instead of stdout.")
@_internal_guard
def fit_poly_cmd(degree: int, clip: float, frac_bits: int,
                 out: Optional[str]) -> None:
    """Fit a fixed-point polynomial surrogate to ReLU on [-c, c]."""
    poly, report = fit_relu_poly(d=degree, c=clip, b=frac_bits)
    _echo_json({
        "degree": degree,
        "clip": clip,
        "frac_bits": frac_bits,
        "int_coeffs": [int(v) for v in poly.int_coeffs],
        "real_coeffs": [float(v) for v in poly.real_coeffs()],
        "max_abs_error": report.max_abs_error,
        "sum_sq_error": report.sum_sq_error,
        "truncated_terms": report.truncated_terms,
    }, out)


# ---------------------------------------------------------------------------
# compile
# ---------------------------------------------------------------------------


@main.command("compile")
@click.option("--variant", type=click.Choice(VARIANTS), default=None)
@click.option("--model", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Start from a saved model instead of a fresh variant.")
@click.option("--strategy", type=click.Choice(STRATEGIES), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--input-hw", type=click.IntRange(min=4), default=None,
              help="Override the spatial input size of a fresh variant.")
@click.option("--out", type=click.Path(dir_okay=False), default=None,
              help="Write the transformed model JSON here.")
@_internal_guard
def compile_cmd(variant, model, strategy, seed, input_hw, out) -> None:
    """Apply a transform pipeline to a model and report the depth change."""
    g = _build_graph(variant, model, seed, input_hw, act=_act_for(strategy))
    transformed, report = apply_pipeline(g, strategy.upper())
    if out:
        save_model(transformed, out)
    rewrites: Dict[str, int] = {}
    for name, sites in report.rewrites:
        rewrites[name] = rewrites.get(name, 0) + len(sites)
    _echo_json({
        "strategy": strategy.upper(),
        "rewrites": rewrites,
        "nodes_removed": report.nodes_removed,
        "depth_before": report.depth_before,
        "depth_after": report.depth_after,
        "model": out,
    }, None)


# ---------------------------------------------------------------------------
# levels
# ---------------------------------------------------------------------------


def level_table_row(variant: str, seed: int = 0,
                    input_hw: Optional[int] = None) -> List[int]:
    row = []
    for strategy in STRATEGIES:
        g = build_resnet_graph(variant, act=_act_for(strategy), seed=seed,
                               input_hw=input_hw)
        transformed, _ = apply_pipeline(g, strategy.upper())
        row.append(critical_path_levels(transformed))
        if strategy == "p2fr":
            row.append(walk_schedule(transformed, ell=2).total)
    return row


def model_level_row(path: str) -> Dict[str, int]:
    """Level counts for the strategies a saved model's form supports.

    Degree-4 activations admit only the P4 analysis; degree-2 models get
    the P2 family plus the tower-reuse walk on the P2FR form.
    """
    g = load_model(path)
    degrees = {n.degree for n in g.nodes.values() if isinstance(n, PolyActNode)}
    row: Dict[str, int] = {}
    if degrees == {4}:
        transformed, _ = apply_pipeline(g, "P4")
        row["P4"] = critical_path_levels(transformed)
        return row
    for strategy in ("P2", "P2F", "P2R", "P2FR"):
        transformed, _ = apply_pipeline(g, strategy)
        row[strategy] = critical_path_levels(transformed)
        if strategy == "P2FR":
            row["P2FRT"] = walk_schedule(transformed, ell=2).total
    return row


@main.command("levels")
@click.option("--variant", type=click.Choice(VARIANTS + ("all",)),
              default="all", show_default=True)
@click.option("--model", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Analyze a saved model file instead of generated variants.")
@click.option("--strategy",
              type=click.Choice(STRATEGIES + ("p2frt", "all")),
              default="all", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--json", "as_json", is_flag=True, help="Emit JSON instead of a table.")
@_internal_guard
def levels_cmd(variant: str, model: Optional[str], strategy: str, seed: int,
               as_json: bool) -> None:
    """Multiplicative-level table per variant and transform strategy."""
    if model is not None:
        row = model_level_row(model)
        if strategy != "all":
            key = strategy.upper()
            if key not in row:
                raise click.UsageError(
                    f"strategy {key} does not apply to this model's activation degree")
            row = {key: row[key]}
        if as_json:
            _echo_json(row, None)
        else:
            click.echo(" ".join(row))
            click.echo(" ".join(str(v) for v in row.values()))
        return
    variants = VARIANTS if variant == "all" else (variant,)
    rows = {v: level_table_row(v, seed=seed) for v in variants}
    if strategy != "all":
        idx = [c.lower() for c in LEVEL_TABLE_COLUMNS].index(strategy)
        picked = {v: row[idx] for v, row in rows.items()}
        if as_json:
            _echo_json({"strategy": strategy.upper(), "levels": picked}, None)
        else:
            for v, val in picked.items():
                click.echo(f"{v} {val}")
        return
    if as_json:
        _echo_json({v: dict(zip(LEVEL_TABLE_COLUMNS, row))
                    for v, row in rows.items()}, None)
        return
    click.echo("variant " + " ".join(LEVEL_TABLE_COLUMNS))
    for v, row in rows.items():
        click.echo(f"{v} " + " ".join(str(x) for x in row))


# ---------------------------------------------------------------------------
# plan
# ---------------------------------------------------------------------------


_PROBE_EPS = (0.0, 1e-7, 1e-6, 1e-5, 1e-4)


@main.command("plan")
@click.option("--variant", type=click.Choice(VARIANTS), default=None)
@click.option("--model", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--strategy", type=click.Choice(STRATEGIES), default="p2fr",
              show_default=True)
@click.option("--preset", type=click.Choice(VARIANTS), default=None,
              help="Use the published modulus chain instead of synthesizing one.")
@click.option("--delta-log2", type=click.IntRange(min=2), default=40,
              show_default=True)
@click.option("--ell", type=click.IntRange(min=1), default=2, show_default=True)
@click.option("--ring-log2", type=click.IntRange(min=4), default=11,
              show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--input-hw", type=click.IntRange(min=4), default=None)
@click.option("--out", type=click.Path(dir_okay=False), default=None,
              help="Write the plan JSON here.")
@click.option("--probe-sweep", is_flag=True,
              help="Sweep rescale-modulus deviation and report probe error.")
@click.option("--probe-depth", type=click.IntRange(min=1), default=8,
              show_default=True)
@click.option("--figures", type=click.Path(file_okay=False), default=None,
              help="Directory for rendered figures.")
@_internal_guard
def plan_cmd(variant, model, strategy, preset, delta_log2, ell, ring_log2,
             seed, input_hw, out, probe_sweep, probe_depth, figures) -> None:
    """Plan the modulus chain for a compiled model."""
    g = _build_graph(variant, model, seed, input_hw, act=_act_for(strategy))
    transformed, _ = apply_pipeline(g, strategy.upper())
    plan = plan_modulus_chain(transformed, delta_log2=delta_log2, ell=ell,
                              preset=preset, ring_degree_log2=ring_log2)
    if out:
        with open(out, "w") as fh:
            json.dump(plan.to_json(), fh, indent=2)
        click.echo(f"wrote {out}")
    click.echo(f"plan {plan.name}: levels={plan.levels} ell={plan.ell} "
               f"delta=2^{plan.delta_log2} N=2^{plan.ring_degree_log2} "
               f"log2Q={plan.log2_q_total:.0f}")
    if not probe_sweep:
        return
    deviations, errors = [], []
    click.echo("eps\tlog2_deviation\tmax_rel_err")
    for eps in _PROBE_EPS:
        chain = perturbed_chain(plan.delta, plan.ell, probe_depth, eps)
        rep = rescale_error_probe(plan.delta, chain, probe_depth, ell=plan.ell)
        dev = abs(math.log2(chain[0]) - plan.ell * plan.delta_log2)
        deviations.append(dev)
        errors.append(rep.max_rel_err)
        click.echo(f"{eps:.0e}\t{dev:.3e}\t{rep.max_rel_err:.3e}")

    def draw(ax):
        floor = errors[0]
        ax.loglog([max(d, 1e-12) for d in deviations], errors, "o-")
        ax.axhline(floor, linestyle=":", linewidth=1)
        ax.set_xlabel("|log2(q / delta^ell)|")
        ax.set_ylabel("probe max relative error")
        ax.set_title(f"rescale deviation probe, depth {probe_depth}")
    _figure(figures, "probe_sweep.png", draw)


# ---------------------------------------------------------------------------
# cluster
# ---------------------------------------------------------------------------


@main.command("cluster")
@click.option("--model", "models", type=click.Path(exists=True, dir_okay=False),
              multiple=True, required=True,
              help="Model JSON; repeat the flag for ensemble mode.")
@click.option("--mode", type=click.Choice(("full", "slice", "ensemble")),
              default="slice", show_default=True)
@click.option("--k", type=click.IntRange(min=1), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), default=None,
              help="Output model JSON (a directory in ensemble mode).")
@click.option("--report-json", type=click.Path(dir_okay=False), default=None)
@_internal_guard
def cluster_cmd(models, mode, k, seed, out, report_json) -> None:
    """Quantize conv weights to k centroids (global, per-slice, or ensemble)."""
    graphs = [load_model(p) for p in models]
    if mode == "ensemble":
        quantized, _, report = ensemble_slice_cluster(graphs, k=k, seed=seed)
        if out:
            os.makedirs(out, exist_ok=True)
            for i, q in enumerate(quantized):
                save_model(q, os.path.join(out, f"member_{i}.json"))
            click.echo(f"wrote {len(quantized)} models under {out}")
    else:
        if len(graphs) != 1:
            raise click.UsageError(f"{mode} mode takes exactly one --model")
        fn = full_cluster if mode == "full" else slice_cluster
        quantized, _, report = fn(graphs[0], k=k, seed=seed)
        if out:
            save_model(quantized, out)
            click.echo(f"wrote {out}")
    payload = {
        "mode": mode,
        "k": k,
        "distortion": report.distortion,
        "encodings": report.encodings,
        "slices": len(report.slice_sizes),
    }
    _echo_json(payload, report_json)


# ---------------------------------------------------------------------------
# train-lab
# ---------------------------------------------------------------------------


@main.command("train-lab")
@click.option("--epochs", type=click.IntRange(min=1), default=12, show_default=True)
@click.option("--clip", type=float, default=2.0, show_default=True)
@click.option("--zeta", type=float, default=1e-3, show_default=True)
@click.option("--lr", type=float, default=0.1, show_default=True)
@click.option("--batch-size", type=click.IntRange(min=1), default=32,
              show_default=True)
@click.option("--samples", type=click.IntRange(min=8), default=200,
              show_default=True)
@click.option("--hidden", type=str, default="16,16", show_default=True,
              help="Comma-separated hidden layer widths.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), default=None,
              help="Also write the per-epoch table to this CSV file.")
@click.option("--lemmas", type=click.Path(dir_okay=False), default=None,
              help="Write the update-geometry check report JSON here.")
@click.option("--figures", type=click.Path(file_okay=False), default=None)
@_internal_guard
def train_lab_cmd(epochs, clip, zeta, lr, batch_size, samples, hidden, seed,
                  csv_path, lemmas, figures) -> None:
    """Train the clipped-penalty toy model and check the update geometry."""
    try:
        widths = [int(w) for w in hidden.split(",") if w.strip()]
    except ValueError:
        raise click.UsageError(f"bad --hidden {hidden!r}")
    if not widths:
        raise click.UsageError("--hidden needs at least one width")
    cfg = TrainConfig(c=clip, zeta=zeta, lr=lr, batch_size=batch_size,
                      epochs=epochs, seed=seed)
    data = make_synthetic(n=samples, seed=seed)
    net = TinyMLP.init([2] + widths + [2], seed=seed)
    net, history = train(net, data, cfg)

    header = ("epoch", "zeta_t", "loss", "ce", "penalty", "accuracy")
    click.echo("\t".join(header))
    for st in history:
        click.echo(f"{st.epoch}\t{st.zeta_t:.2e}\t{st.loss:.6f}\t{st.ce:.6f}"
                   f"\t{st.pen:.6f}\t{st.accuracy:.4f}")
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for st in history:
                writer.writerow([st.epoch, st.zeta_t, st.loss, st.ce, st.pen,
                                 st.accuracy])
        click.echo(f"wrote {csv_path}")

    sample = (data[0][:1], data[1][:1])
    reports = [lemma1_check(net, sample, cfg), lemma2_check(net, sample, cfg)]
    for rep in reports:
        click.echo(f"{rep.lemma}: {'pass' if rep.passed else 'FAIL'}")
    if lemmas:
        with open(lemmas, "w") as fh:
            json.dump([rep.to_json() for rep in reports], fh, indent=2)
        click.echo(f"wrote {lemmas}")

    def draw(ax):
        xs = [st.epoch for st in history]
        ax.plot(xs, [st.loss for st in history], label="total")
        ax.plot(xs, [st.ce for st in history], label="cross-entropy")
        ax.plot(xs, [st.pen for st in history], label="penalty")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend()
        ax2 = ax.twinx()
        ax2.plot(xs, [st.accuracy for st in history], "k:", label="accuracy")
        ax2.set_ylabel("accuracy")
    _figure(figures, "train_lab.png", draw)
    if not all(rep.passed for rep in reports):
        raise CheckFailure("update-geometry checks failed")


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


@main.command("run")
@click.option("--model", "models", type=click.Path(exists=True, dir_okay=False),
              multiple=True, required=True,
              help="Model JSON; repeat for a packed ensemble run.")
@click.option("--plan", "plan_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--input", "input_path", type=click.Path(exists=True, dir_okay=False),
              required=True, help="JSON header line + raw little-endian float64.")
@click.option("--trace", "trace_path", type=click.Path(dir_okay=False),
              default=None, help="Write a per-instruction level trace CSV.")
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@_internal_guard
def run_cmd(models, plan_path, input_path, trace_path, out) -> None:
    """Execute a model under the simulator and print the logits."""
    graphs = [load_model(p) for p in models]
    with open(plan_path) as fh:
        plan = plan_from_json(json.load(fh))
    image = read_input_tensor(input_path)
    if image.ndim != 3:
        raise click.UsageError(f"input must be (C, h, w), got {image.shape}")
    result = run_model(graphs, plan, image, trace=trace_path is not None)
    if trace_path:
        with open(trace_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("index", "op", "node", "out", "sublevel", "level",
                             "log2_scale"))
            for row in result.trace:
                writer.writerow((row.index, row.op, row.node, row.out,
                                 row.sublevel, row.level,
                                 f"{row.log2_scale:.3f}"))
        click.echo(f"wrote {trace_path}")
    _echo_json({
        "logits": [float(v) for v in result.logits],
        "member_logits": [[float(v) for v in row]
                          for row in result.member_logits],
        "argmax": int(np.argmax(result.logits)),
        "rescales_used": result.rescales_used,
        "levels": plan.levels,
    }, out)


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------


@main.command("compare")
@click.option("--variant", type=click.Choice(VARIANTS), default=None)
@click.option("--model", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Reference model JSON instead of a fresh variant.")
@click.option("--strategy", type=click.Choice(STRATEGIES), default="p2fr",
              show_default=True)
@click.option("--compiled", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Pre-transformed model to check; compiled "
              "fresh from the reference when omitted.")
@click.option("--preset", type=click.Choice(VARIANTS), default=None)
@click.option("--delta-log2", type=click.IntRange(min=2), default=40,
              show_default=True)
@click.option("--ell", type=click.IntRange(min=1), default=2, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--input-hw", type=click.IntRange(min=4), default=None)
@click.option("--n-inputs", type=click.IntRange(min=1), default=100,
              show_default=True, help="Random inputs for the equivalence check.")
@click.option("--equiv-rtol", type=float, default=1e-8, show_default=True)
@click.option("--tolerance", type=float, default=1e-6, show_default=True,
              help="Relative tolerance for simulated vs reference logits.")
@click.option("--json", "json_path", type=click.Path(dir_okay=False), default=None)
@_internal_guard
def compare_cmd(variant, model, strategy, compiled, preset, delta_log2, ell,
                seed, input_hw, n_inputs, equiv_rtol, tolerance,
                json_path) -> None:
    """End-to-end check: transform equivalence, level table, sim fidelity."""
    reference = _build_graph(variant, model, seed, input_hw,
                             act=_act_for(strategy))
    if compiled:
        transformed = load_model(compiled)
    else:
        transformed, _ = apply_pipeline(reference, strategy.upper())
    checks: List[Dict] = []

    equiv = check_equivalence(reference, transformed, n_inputs=n_inputs,
                              rtol=equiv_rtol, seed=seed)
    checks.append({
        "name": "transform-equivalence",
        "passed": bool(equiv.passed),
        "max_rel_err": equiv.max_rel_err,
        "argmax_match_rate": equiv.argmax_match_rate,
    })

    plan = None
    analyzer = critical_path_levels(transformed)
    walk_total = walk_schedule(transformed, ell=ell).total
    level_check = {"name": "level-table", "analyzer_levels": analyzer,
                   "walk_levels": walk_total}
    try:
        plan = plan_modulus_chain(transformed, delta_log2=delta_log2, ell=ell,
                                  preset=preset)
        level_check["plan_levels"] = plan.levels
        level_check["passed"] = plan.levels == walk_total
    except PlanError as exc:
        level_check["passed"] = False
        level_check["error"] = str(exc)
    if variant is not None and not compiled:
        expected = dict(zip(LEVEL_TABLE_COLUMNS,
                            level_table_row(variant, seed=seed)))
        level_check["expected"] = expected
        level_check["passed"] = bool(
            level_check.get("passed")
            and expected[strategy.upper()] == analyzer
            and (strategy != "p2fr" or expected["P2FRT"] == walk_total))
    checks.append(level_check)

    sim_check: Dict = {"name": "sim-fidelity"}
    if plan is None:
        sim_check["passed"] = False
        sim_check["error"] = "no plan"
    else:
        shape = reference.nodes[reference.input_id()].shape
        rng = np.random.default_rng(seed)
        image = rng.uniform(-1.0, 1.0, size=shape)
        ref_logits = reference_eval(transformed, image)
        result = run_model(transformed, plan, image)
        rel = float(np.max(np.abs(result.logits - ref_logits))
                    / np.max(np.abs(ref_logits)))
        sim_check.update({
            "max_rel_err": rel,
            "tolerance": tolerance,
            "argmax_match": bool(np.argmax(result.logits) == np.argmax(ref_logits)),
            "rescales_used": result.rescales_used,
        })
        sim_check["passed"] = bool(rel <= tolerance and sim_check["argmax_match"]
                                   and result.rescales_used == plan.levels)
    checks.append(sim_check)

    passed = all(c["passed"] for c in checks)
    payload = {"passed": passed, "checks": checks}
    if json_path:
        with open(json_path, "w") as fh:
            json.dump(payload, fh, indent=2)
    click.echo(json.dumps(payload, indent=2))
    if not passed:
        first = next(c["name"] for c in checks if not c["passed"])
        raise CheckFailure(f"{first} check failed")
    click.echo("PASS")


if __name__ == "__main__":
    main()
