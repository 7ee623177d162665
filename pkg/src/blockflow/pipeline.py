"""Run configuration and the stages behind the command-line verbs.

Every stage reads its inputs from, and writes its outputs to, the run
directory named in the config. Randomness comes from one root seed split
into named substreams, so toggling one stage never shifts another's draws.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import zlib
from pathlib import Path

import numpy as np

from . import blocks, flow, metrics, synth
from . import preprocess as pp
from .conditioning import ConditionSchema, ConditionTable, read_condition_csv
from .vae import GeneBlockVAE, VaeConfig, encode_cells, train_vae, transfer

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

DEFAULTS: dict = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "out_dir": "run",
    "paths": {
        "expression": "expression.csv",
        "conditions": "conditions.csv",
        "embeddings": "embeddings.csv",
        "schema": "schema.json",
        "truth": "truth.json",
        "layout": "layout.json",
        "vae_checkpoint": "vae.bfck",
        "vae_loss": "vae_loss.csv",
        "flow_checkpoint": "flow.bfck",
        "flow_loss": "flow_loss.csv",
        "generated": "generated.csv",
        "transferred": "transferred.csv",
        "metrics": "metrics.csv",
    },
    "synth": {"preset": "acceptance", "n_cells": 2000, "n_genes": 200, "effect": 1.5, "spec": None},
    "blocks": {"block_size": 32, "outer_iters": 50, "epsilon_scale": 0.05, "sinkhorn_iters": 1000},
    "vae": {"e": 32, "d": 8, "n_enc_blocks": 2, "n_dec_blocks": 2, "n_heads": 2, "kl_weight": 1e-3, "mask_p": 0.6},
    "flow": {"n_blocks": 3, "e": 32, "n_heads": 2, "ode_steps": 100, "cfg_weight": 2.0, "uncond_p": 0.1,
             "mask_p": 0.6, "method": "euler"},
    "train": {"vae_epochs": 300, "flow_epochs": 500, "batch_size": 128, "lr": 1e-3, "weight_decay": 2.5e-5,
              "warmup_epochs": 20, "exclude": []},
    "generate": {"conditions": None},
    "transfer": {"select": [], "target": []},
    "evaluate": {"space": "preprocessed", "max_exact": 512, "columns": None, "real": None, "real_stage": "raw",
                 "generated": None},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


def set_key(cfg: dict, dotted: str, value) -> None:
    node = cfg
    parts = dotted.split(".")
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def load_config(path=None, overrides: dict | None = None) -> dict:
    """defaults < config file < overrides (dotted keys)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        doc = json.loads(Path(path).read_text())
        if doc.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {doc.get('schema_version')}")
        cfg = _merge(cfg, doc)
    for key, value in (overrides or {}).items():
        set_key(cfg, key, value)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    try:
        if int(cfg["seed"]) < 0:
            raise ConfigError("seed must be nonnegative")
        if int(cfg["blocks"]["block_size"]) < 1:
            raise ConfigError("blocks.block_size must be >= 1")
        t = cfg["train"]
        if t["vae_epochs"] < 0 or t["flow_epochs"] < 0 or t["batch_size"] < 1 or t["lr"] <= 0:
            raise ConfigError("train: epochs must be >= 0, batch_size >= 1, lr > 0")
        VaeConfig(block_size=1, n_blocks=1, **cfg["vae"])
        flow.FlowConfig(n_tokens=1, d=1, **cfg["flow"])
        if cfg["evaluate"]["space"] not in metrics.SPACES:
            raise ConfigError(f"evaluate.space must be one of {metrics.SPACES}")
        if cfg["evaluate"]["real_stage"] not in ("raw", "depth-normalized"):
            raise ConfigError("evaluate.real_stage must be 'raw' or 'depth-normalized'")
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None


def rng_for(cfg: dict, stage: str) -> np.random.Generator:
    return np.random.default_rng([int(cfg["seed"]), zlib.crc32(stage.encode())])


def path(cfg: dict, key: str) -> Path:
    p = Path(cfg["paths"][key])
    return p if p.is_absolute() else Path(cfg["out_dir"]) / p


def _require_inputs(cfg: dict, *keys: str) -> None:
    missing = [str(path(cfg, k)) for k in keys if not path(cfg, k).exists()]
    if missing:
        raise FileNotFoundError(f"missing input file(s): {', '.join(missing)}")


def _parse_pairs(pairs) -> list[tuple[str, str]]:
    out = []
    for item in pairs:
        if isinstance(item, (list, tuple)):
            out.append((item[0], item[1]))
        else:
            name, _, label = str(item).partition("=")
            if not label:
                raise ConfigError(f"expected COLUMN=LABEL, got {item!r}")
            out.append((name, label))
    return out


def _matches(table: ConditionTable, pairs: list[tuple[str, str]]) -> np.ndarray:
    hit = np.ones(len(table), dtype=bool)
    for name, label in pairs:
        if name not in table.schema.names:
            raise ConfigError(f"unknown condition column {name!r}")
        k = table.schema.names.index(name)
        hit &= table.indices[:, k] == table.schema.index(k, label)
    return hit


# data loading

def load_cells(expr_path, cond_path, schema: ConditionSchema | None = None, stage: str = "raw"):
    """An expression matrix and its condition table, rows aligned by cell id."""
    for p in (expr_path, cond_path):
        if not Path(p).exists():
            raise FileNotFoundError(f"missing input file: {p}")
    expr = pp.read_matrix(expr_path, stage)
    cell_ids, conds = read_condition_csv(cond_path, schema)
    if list(cell_ids) != list(expr.cell_ids):
        pos = {c: i for i, c in enumerate(cell_ids)}
        try:
            order = [pos[c] for c in expr.cell_ids]
        except KeyError as exc:
            raise ConfigError(f"cell {exc.args[0]!r} has no condition row") from None
        conds = conds.subset(np.array(order))
    return expr, conds


def _schema(cfg: dict) -> ConditionSchema | None:
    return ConditionSchema.load(path(cfg, "schema")) if path(cfg, "schema").exists() else None


def load_dataset(cfg: dict):
    """Expression (raw counts) and aligned conditions."""
    return load_cells(path(cfg, "expression"), path(cfg, "conditions"), _schema(cfg))


def _in_layout_order(m: pp.ExpressionMatrix, layout: blocks.BlockLayout) -> pp.ExpressionMatrix:
    col = {g: j for j, g in enumerate(m.gene_ids)}
    missing = [g for g in layout.gene_ids if g not in col]
    if missing:
        raise ConfigError(f"layout gene {missing[0]!r} is not in the expression matrix")
    order = [col[g] for g in layout.gene_ids]
    return m.replace(values=m.values[:, order], gene_ids=layout.gene_ids,
                     scale_factors=None if m.scale_factors is None else m.scale_factors[order])


def training_split(cfg: dict):
    """Cells used for training: everything except rows matching all ``train.exclude`` pairs."""
    expr, conds = load_dataset(cfg)
    exclude = _parse_pairs(cfg["train"]["exclude"])
    keep = ~_matches(conds, exclude) if exclude else np.ones(len(conds), dtype=bool)
    return expr.subset(keep), conds.subset(np.flatnonzero(keep))


def _write_trace(trace: list[dict], out) -> None:
    with Path(out).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(trace[0]) if trace else ["epoch"])
        w.writeheader()
        for row in trace:
            w.writerow({k: (repr(float(v)) if k != "epoch" else v) for k, v in row.items()})


# stages

def run_synth(cfg: dict) -> dict[str, Path]:
    s = cfg["synth"]
    if s.get("spec"):
        spec = synth.SyntheticSpec.from_json(s["spec"])
    elif s["preset"] == "acceptance":
        spec = synth.acceptance_spec(s["n_cells"], s["n_genes"], s["effect"])
    elif s["preset"] == "perturbation":
        spec = synth.perturbation_spec(s["n_cells"], s["n_genes"], shift=s["effect"])
    else:
        raise ConfigError(f"unknown synth preset {s['preset']!r}")
    data = synth.generate(spec, int(rng_for(cfg, "synth").integers(2**31)))
    Path(cfg["out_dir"]).mkdir(parents=True, exist_ok=True)
    return synth.write(data, cfg["out_dir"])


def run_build_blocks(cfg: dict) -> blocks.BlockLayout:
    _require_inputs(cfg, "embeddings")
    table = blocks.GeneEmbeddingTable.read_csv(path(cfg, "embeddings"))
    b = cfg["blocks"]
    layout = blocks.build_blocks(
        table,
        int(b["block_size"]),
        seed=int(rng_for(cfg, "blocks").integers(2**31)),
        outer_iters=int(b["outer_iters"]),
        epsilon_scale=float(b["epsilon_scale"]),
        sinkhorn_iters=int(b["sinkhorn_iters"]),
    )
    log.info("layout: L=%d K=%d padding=%d objective trace=%s", layout.n_blocks, layout.block_size,
             layout.n_padding, [round(v, 6) for v in layout.objective_trace])
    layout.save(path(cfg, "layout"))
    return layout


def run_train_vae(cfg: dict) -> GeneBlockVAE:
    _require_inputs(cfg, "layout")
    layout = blocks.BlockLayout.load(path(cfg, "layout"))
    expr, conds = training_split(cfg)
    m = pp.preprocess(_in_layout_order(expr, layout))
    x = blocks.reshape_to_blocks(m, layout)
    t = cfg["train"]
    vcfg = VaeConfig(block_size=layout.block_size, n_blocks=layout.n_blocks, **cfg["vae"])
    model, opt, trace = train_vae(
        x, conds, vcfg, int(t["vae_epochs"]), rng_for(cfg, "vae"), slot_mask=layout.slot_mask(),
        lr=float(t["lr"]), weight_decay=float(t["weight_decay"]), warmup_epochs=int(t["warmup_epochs"]),
        batch_size=int(t["batch_size"]),
    )
    model.scale_factors = m.scale_factors
    model.layout_signature = layout.signature()
    model.save(path(cfg, "vae_checkpoint"), opt)
    _write_trace(trace, path(cfg, "vae_loss"))
    return model


def run_train_fm(cfg: dict) -> flow.FlowNet:
    _require_inputs(cfg, "layout", "vae_checkpoint")
    layout = blocks.BlockLayout.load(path(cfg, "layout"))
    vae = GeneBlockVAE.load(path(cfg, "vae_checkpoint"))
    if vae.layout_signature != layout.signature():
        raise ConfigError("VAE checkpoint was trained with a different block layout")
    expr, conds = training_split(cfg)
    m = pp.preprocess(_in_layout_order(expr, layout), vae.scale_factors)
    x = blocks.reshape_to_blocks(m, layout)
    rng = rng_for(cfg, "flow")
    mu, var = encode_cells(x, conds, vae, rng)
    t = cfg["train"]
    fcfg = flow.FlowConfig(n_tokens=layout.n_blocks, d=vae.config.d, **cfg["flow"])
    model, opt, trace = flow.train_flow(
        mu, conds, fcfg, int(t["flow_epochs"]), rng, latent_var=var, lr=float(t["lr"]),
        weight_decay=float(t["weight_decay"]), warmup_epochs=int(t["warmup_epochs"]),
        batch_size=int(t["batch_size"]),
    )
    model.layout_signature = layout.signature()
    model.save(path(cfg, "flow_checkpoint"), opt)
    _write_trace(trace, path(cfg, "flow_loss"))
    return model


def _load_models(cfg: dict):
    _require_inputs(cfg, "layout", "vae_checkpoint", "flow_checkpoint")
    layout = blocks.BlockLayout.load(path(cfg, "layout"))
    return layout, GeneBlockVAE.load(path(cfg, "vae_checkpoint")), flow.FlowNet.load(path(cfg, "flow_checkpoint"))


def run_generate(cfg: dict) -> pp.ExpressionMatrix:
    """Generate one cell per row of the condition assignment (default: the training cells' conditions)."""
    layout, vae, fnet = _load_models(cfg)
    if cfg["generate"]["conditions"]:
        if not Path(cfg["generate"]["conditions"]).exists():
            raise FileNotFoundError(f"missing input file: {cfg['generate']['conditions']}")
        _, conds = read_condition_csv(cfg["generate"]["conditions"], vae.schema)
    else:
        _, conds = training_split(cfg)
    gen = flow.generate(len(conds), conds, vae, fnet, layout, vae.scale_factors, fnet.config,
                        rng_for(cfg, "generate"))
    pp.write_matrix(gen, path(cfg, "generated"))
    conds.write_csv(conditions_path_for(path(cfg, "generated")), gen.cell_ids)
    return gen


def run_transfer(cfg: dict) -> pp.ExpressionMatrix:
    """Re-decode the selected cells with some condition columns replaced."""
    _require_inputs(cfg, "layout", "vae_checkpoint")
    layout = blocks.BlockLayout.load(path(cfg, "layout"))
    vae = GeneBlockVAE.load(path(cfg, "vae_checkpoint"))
    expr, conds = load_dataset(cfg)
    select = _parse_pairs(cfg["transfer"]["select"])
    rows = np.flatnonzero(_matches(conds, select)) if select else np.arange(len(conds))
    if rows.size == 0:
        raise ConfigError("transfer selection matches no cells")
    cells, source = expr.subset(rows), conds.subset(rows)
    target = source
    for name, label in _parse_pairs(cfg["transfer"]["target"]):
        target = target.replace_column(name, label)
    out = transfer(_in_layout_order(cells, layout), source, target, vae, layout, rng_for(cfg, "transfer"))
    pp.write_matrix(out, path(cfg, "transferred"))
    target.write_csv(conditions_path_for(path(cfg, "transferred")), out.cell_ids)
    return out


def comparable_arrays(real: pp.ExpressionMatrix, gen: pp.ExpressionMatrix, space: str,
                      real_conds=None, gen_conds=None, vae: GeneBlockVAE | None = None,
                      layout: blocks.BlockLayout | None = None, factors: np.ndarray | None = None):
    """Bring real and generated cells into one comparison space.

    ``raw`` compares depth-normalized expression, ``preprocessed`` log1p +
    max-abs scaling (factors from ``factors``, else fitted on the real cells),
    ``latent`` posterior means under the VAE.
    """
    gen = gen.replace(values=gen.values[:, [gen.gene_ids.index(g) for g in real.gene_ids]], gene_ids=real.gene_ids) \
        if gen.gene_ids != real.gene_ids else gen
    if space == "raw":
        r = pp.normalize_depth(real) if real.stage == "raw" else pp.unscale(real) if real.stage == "maxabs-scaled" else real
        g = gen if gen.stage == "depth-normalized" else pp.unscale(gen)
        return r.values, g.values
    r_log, g_log = pp.to_logged(real), pp.to_logged(gen)
    f = factors if factors is not None else pp.maxabs_factors(r_log.values)
    r_s = pp.maxabs_scale(r_log, f)
    g_s = pp.maxabs_scale(g_log, f)
    if space == "preprocessed":
        return r_s.values, g_s.values
    if vae is None or layout is None:
        raise ConfigError("latent-space evaluation needs the VAE checkpoint and layout")
    rng = np.random.default_rng(0)
    mu_r, _ = encode_cells(blocks.reshape_to_blocks(r_s, layout), real_conds, vae, rng)
    mu_g, _ = encode_cells(blocks.reshape_to_blocks(g_s, layout), gen_conds, vae, rng)
    return mu_r.reshape(len(mu_r), -1), mu_g.reshape(len(mu_g), -1)


def conditions_path_for(matrix_path) -> Path:
    p = Path(matrix_path)
    return p.with_name(p.stem + "_conditions.csv")


def run_evaluate(cfg: dict) -> list[dict]:
    """Per-condition metrics between real cells and generated (or transferred) cells."""
    ev = cfg["evaluate"]
    if ev["real"] and Path(ev["real"]).resolve() != path(cfg, "expression").resolve():
        real, real_conds = load_cells(ev["real"], conditions_path_for(ev["real"]), _schema(cfg), ev["real_stage"])
    else:
        real, real_conds = load_dataset(cfg)
    gen_path = Path(ev["generated"]) if ev["generated"] else path(cfg, "generated")
    gen, gen_conds = load_cells(gen_path, conditions_path_for(gen_path), real_conds.schema, "depth-normalized")

    vae = layout = factors = None
    if path(cfg, "vae_checkpoint").exists() and path(cfg, "layout").exists():
        vae = GeneBlockVAE.load(path(cfg, "vae_checkpoint"))
        layout = blocks.BlockLayout.load(path(cfg, "layout"))
        real = _in_layout_order(real, layout)
        factors = vae.scale_factors
    r, g = comparable_arrays(real, gen, ev["space"], real_conds, gen_conds, vae, layout, factors)

    columns = ev["columns"] or list(real_conds.schema.names)
    for c in columns:
        if c not in real_conds.schema.names:
            raise ConfigError(f"unknown condition column {c!r}")
    ks = [real_conds.schema.names.index(c) for c in columns]
    real_labels = [tuple(row[k] for k in ks) for row in real_conds.labels()]
    gen_labels = [tuple(row[k] for k in ks) for row in gen_conds.labels()]
    rows = metrics.evaluate_by_condition(r, real_labels, g, gen_labels, max_exact=int(ev["max_exact"]),
                                         seed=int(rng_for(cfg, "eval").integers(2**31)))
    metrics.write_report(rows, columns, path(cfg, "metrics"))
    return rows


def run_all(cfg: dict) -> list[dict]:
    run_synth(cfg)
    run_build_blocks(cfg)
    run_train_vae(cfg)
    run_train_fm(cfg)
    run_generate(cfg)
    return run_evaluate(cfg)
