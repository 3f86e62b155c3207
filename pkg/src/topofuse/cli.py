"""Command line interface.

Heavy imports happen inside handlers so --threads can pin the BLAS pool
before numpy loads. Every run writes a manifest.json with the resolved
configuration; re-running the recorded argv reproduces the outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import TopofuseError

VERSION = "0.1.0"
_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"{message}\n{self.format_usage()}")


def _build_parser() -> _Parser:
    p = _Parser(prog="topofuse", description="Topology-preserving multi-modal embedding for spatial omics")
    p.add_argument("--version", action="version", version=f"topofuse {VERSION}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=False, config=True, emb=False, labels=False, ckpt=False):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--threads", type=int, default=None, help="cap BLAS threads (1 = deterministic)")
        if data:
            sp.add_argument("--data", required=True, help="directory with tra.csv and coords.csv")
        if config:
            sp.add_argument("--config", default=None, help="JSON config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
        if emb:
            sp.add_argument("--emb", required=True, help="embedding.csv from a train run")
        if labels:
            sp.add_argument("--labels", required=True, help="labels.csv from a cluster run")
        if ckpt:
            sp.add_argument("--ckpt", required=True, help="checkpoint written by train")

    sp = sub.add_parser("synth", help="generate a synthetic dataset with planted domains")
    common(sp, config=False)
    sp.add_argument("--domains", type=int, default=4)
    sp.add_argument("--spots-per-domain", type=int, default=50)
    sp.add_argument("--genes", type=int, default=200)
    sp.add_argument("--mor-dims", type=int, default=12)
    sp.add_argument("--signal-tra", type=float, default=3.0)
    sp.add_argument("--signal-mor", type=float, default=2.0)
    sp.add_argument("--noise-std", type=float, default=1.0)
    sp.add_argument("--spacing", type=float, default=1.0)

    sp = sub.add_parser("preprocess", help="filter, normalize and standardize a dataset")
    common(sp, data=True)

    sp = sub.add_parser("train", help="fit the fused embedding")
    common(sp, data=True)

    sp = sub.add_parser("cluster", help="mixture-model clustering of an embedding")
    common(sp, data=True, emb=True)
    sp.add_argument("--restarts", type=int, default=10)

    sp = sub.add_parser("visualize", help="2-D visualization of an embedding")
    common(sp, emb=True)
    sp.add_argument("--labels", default=None, help="labels.csv used for coloring")

    sp = sub.add_parser("deconvolve", help="L1 decomposition onto cluster means")
    common(sp, emb=True, labels=True)
    sp.add_argument("--l1", type=float, default=0.1)

    sp = sub.add_parser("markers", help="rank genes by knockout displacement")
    common(sp, data=True, labels=True, ckpt=True)
    sp.add_argument("--top-n", type=int, default=10)

    sp = sub.add_parser("trajectory", help="cluster-graph connectivity")
    common(sp, emb=True, labels=True)
    sp.add_argument("--paga-k", type=int, default=15)

    sp = sub.add_parser("evaluate", help="agreement metrics for an embedding")
    common(sp, data=True, emb=True)
    sp.add_argument("--labels", default=None, help="predicted labels.csv")
    sp.add_argument("--mrre-k", type=int, default=10)

    sp = sub.add_parser("report", help="train plus every downstream analysis")
    common(sp, data=True)
    sp.add_argument("--l1", type=float, default=0.1)
    sp.add_argument("--top-n", type=int, default=10)
    sp.add_argument("--paga-k", type=int, default=15)
    sp.add_argument("--mrre-k", type=int, default=10)
    sp.add_argument("--restarts", type=int, default=10)
    return p


def _pin_threads(argv):
    threads = None
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif a.startswith("--threads="):
            threads = a.split("=", 1)[1]
    if threads is not None:
        for var in _THREAD_VARS:
            os.environ[var] = str(threads)


def _parse_override(text: str):
    key, sep, val = text.partition("=")
    if not sep or not key:
        raise CliError(f"--set expects KEY=VALUE, got {text!r}")
    try:
        return key, json.loads(val)
    except json.JSONDecodeError:
        return key, val


def _resolve_config(args):
    from .dataio import RunConfig, load_config
    from .dataio import _CONFIG_SPEC  # noqa: F401  (key validation)
    from .errors import UnknownKey

    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        key, value = _parse_override(item)
        if key not in _CONFIG_SPEC:
            raise UnknownKey(f"unknown config key {key!r}")
        overrides[key] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg = cfg.replace(**overrides)
    return cfg


def _write_manifest(args, cfg, extra=None):
    payload = {
        "artifact": "topofuse",
        "version": VERSION,
        "command": args.command,
        "argv": list(args._argv),
        "inputs": {
            k: getattr(args, k)
            for k in ("data", "config", "emb", "labels", "ckpt")
            if getattr(args, k, None)
        },
        "out": args.out,
        "threads": args.threads,
        "config": cfg.to_dict() if cfg is not None else None,
    }
    if extra:
        payload.update(extra)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    return path


def _load_data(args):
    from .dataio import load_dataset

    d = args.data
    tra = os.path.join(d, "tra.csv")
    coords = os.path.join(d, "coords.csv")
    mor = os.path.join(d, "mor.csv")
    labels = os.path.join(d, "labels.csv")
    return load_dataset(
        tra,
        coords,
        mor_path=mor if os.path.isfile(mor) else None,
        labels_path=labels if os.path.isfile(labels) else None,
    )


def _spatial_graph(coords, cfg):
    from .topology import auto_epsilon, build_spatial_graph

    eps = cfg.epsilon_radius
    if eps == "auto":
        eps = auto_epsilon(coords)
    return build_spatial_graph(coords, float(eps)), float(eps)


def _resolve_n_clusters(cfg, ds):
    # Default to the annotated domain count when the user did not pin one.
    if "n_clusters" not in cfg.explicit and ds.labels is not None:
        return len(set(ds.labels.tolist()))
    return cfg.n_clusters


def _read_labels_csv(path):
    import numpy as np

    from .dataio import read_matrix_csv

    _, ids, mat = read_matrix_csv(path, "labels")
    return ids, np.rint(mat[:, 0]).astype(np.int64)


def cmd_synth(args) -> int:
    from .dataio import write_dataset, write_matrix_csv
    from .synth import SynthSpec, generate

    spec = SynthSpec(
        n_domains=args.domains,
        spots_per_domain=args.spots_per_domain,
        spacing=args.spacing,
        genes=args.genes,
        mor_dims=args.mor_dims,
        signal_tra=args.signal_tra,
        signal_mor=args.signal_mor,
        noise_std=args.noise_std,
        seed=args.seed if args.seed is not None else 42,
    )
    ds, truth = generate(spec)
    os.makedirs(args.out, exist_ok=True)
    write_dataset(ds, args.out)
    write_matrix_csv(os.path.join(args.out, "truth_tra.csv"), ds.spot_ids, ds.gene_ids, truth["tra"])
    if truth["mor"] is not None:
        cols = [f"m{i}" for i in range(truth["mor"].shape[1])]
        write_matrix_csv(os.path.join(args.out, "truth_mor.csv"), ds.spot_ids, cols, truth["mor"])
    _write_manifest(args, None, extra={"synth_spec": spec.__dict__ | {}})
    print(f"wrote {ds.n_spots} spots x {len(ds.gene_ids)} genes to {args.out}")
    return 0


def cmd_preprocess(args) -> int:
    from .dataio import write_matrix_csv
    from .preprocess import preprocess_dataset

    ds = _load_data(args)
    cfg = _resolve_config(args)
    pre = preprocess_dataset(ds, cfg)
    os.makedirs(args.out, exist_ok=True)
    write_matrix_csv(os.path.join(args.out, "pre_tra.csv"), ds.spot_ids, pre.gene_ids, pre.tra)
    if pre.mor is not None:
        cols = [f"pc{i}" for i in range(pre.mor.shape[1])]
        write_matrix_csv(os.path.join(args.out, "pre_mor.csv"), ds.spot_ids, cols, pre.mor)
    _write_manifest(args, cfg)
    print(f"kept {len(pre.gene_ids)} genes for {pre.n_spots} spots")
    return 0


def _train_once(ds, cfg):
    from .objective import train
    from .preprocess import preprocess_dataset

    pre = preprocess_dataset(ds, cfg)
    spatial, eps = _spatial_graph(ds.coords, cfg)
    state, emb = train(pre, spatial, cfg)
    return pre, spatial, eps, state, emb


def _write_losses(path, history):
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "l_topo_tra", "l_topo_mor", "l_recon", "total"])
        for rec in history:
            w.writerow(
                [
                    rec["epoch"],
                    "%.17g" % rec["l_topo_tra"],
                    "" if rec["l_topo_mor"] is None else "%.17g" % rec["l_topo_mor"],
                    "%.17g" % rec["l_recon"],
                    "%.17g" % rec["total"],
                ]
            )


def cmd_train(args) -> int:
    from .dataio import write_matrix_csv
    from .network import save_checkpoint

    ds = _load_data(args)
    cfg = _resolve_config(args)
    pre, spatial, eps, state, emb = _train_once(ds, cfg)
    os.makedirs(args.out, exist_ok=True)
    write_matrix_csv(
        os.path.join(args.out, "embedding.csv"),
        ds.spot_ids,
        [f"z{i}" for i in range(emb.z.shape[1])],
        emb.z,
    )
    write_matrix_csv(
        os.path.join(args.out, "y_tra.csv"),
        ds.spot_ids,
        [f"y{i}" for i in range(emb.y_tra.shape[1])],
        emb.y_tra,
    )
    if emb.y_mor is not None:
        write_matrix_csv(
            os.path.join(args.out, "y_mor.csv"),
            ds.spot_ids,
            [f"y{i}" for i in range(emb.y_mor.shape[1])],
            emb.y_mor,
        )
    save_checkpoint(state.params, os.path.join(args.out, "ckpt.json"))
    _write_losses(os.path.join(args.out, "losses.csv"), state.history)
    _write_manifest(
        args,
        cfg,
        extra={"epsilon_used": eps, "isolated_nodes": len(spatial.isolated), "notes": state.notes},
    )
    print(f"trained {cfg.epochs} epochs; final loss {state.history[-1]['total']:.6g}")
    return 0


def cmd_cluster(args) -> int:
    import numpy as np

    from .dataio import read_matrix_csv
    from .downstream import gmm_cluster, refine_labels

    ds = _load_data(args)
    cfg = _resolve_config(args)
    _, ids, z = read_matrix_csv(args.emb, "embedding")
    k = _resolve_n_clusters(cfg, ds)
    model = gmm_cluster(z, k, restarts=args.restarts, rng=np.random.default_rng([cfg.seed, 3]))
    labels = model.labels
    if cfg.refine:
        index = {sid: i for i, sid in enumerate(ds.spot_ids)}
        coords = ds.coords[[index[sid] for sid in ids]]
        labels = refine_labels(labels, coords)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "labels.csv"), "w", encoding="utf-8") as fh:
        fh.write("spot_id,label\n")
        for sid, lab in zip(ids, labels):
            fh.write(f"{sid},{int(lab)}\n")
    _write_manifest(args, cfg, extra={"n_clusters": k})
    print(f"assigned {k} clusters over {len(ids)} spots")
    return 0


def cmd_visualize(args) -> int:
    import numpy as np

    from .dataio import plot_scatter, read_matrix_csv, write_matrix_csv
    from .downstream import fit_visualization

    cfg = _resolve_config(args)
    _, ids, z = read_matrix_csv(args.emb, "embedding")
    vis = fit_visualization(z, cfg)
    labels = np.zeros(len(ids), dtype=np.int64)
    if args.labels:
        _, labels = _read_labels_csv(args.labels)
    os.makedirs(args.out, exist_ok=True)
    write_matrix_csv(os.path.join(args.out, "vis.csv"), ids, ["v0", "v1"], vis)
    plot_scatter(vis, labels, os.path.join(args.out, "vis.svg"))
    _write_manifest(args, cfg)
    print(f"embedded {len(ids)} spots in 2-D")
    return 0


def cmd_deconvolve(args) -> int:
    from .dataio import read_matrix_csv, write_matrix_csv
    from .downstream import deconvolve

    cfg = _resolve_config(args)
    _, ids, z = read_matrix_csv(args.emb, "embedding")
    _, labels = _read_labels_csv(args.labels)
    res = deconvolve(z, labels, args.l1)
    os.makedirs(args.out, exist_ok=True)
    import numpy as np

    cols = [f"w_{c}" for c in res.cluster_ids] + ["weight_dispersion"]
    body = np.column_stack([res.weights, res.impurity])
    write_matrix_csv(os.path.join(args.out, "deconvolution.csv"), ids, cols, body)
    _write_manifest(args, cfg, extra={"l1": args.l1, "kkt": res.kkt, "converged": res.converged})
    print(f"deconvolved {len(ids)} spots onto {len(res.cluster_ids)} cluster means")
    return 0


def cmd_markers(args) -> int:
    import csv

    from .downstream import marker_tables
    from .network import load_checkpoint
    from .preprocess import preprocess_dataset

    ds = _load_data(args)
    cfg = _resolve_config(args)
    params = load_checkpoint(args.ckpt)
    pre = preprocess_dataset(ds, cfg)
    spatial, _ = _spatial_graph(ds.coords, cfg)
    _, labels = _read_labels_csv(args.labels)
    tables = marker_tables(pre, params, spatial, labels, top_n=args.top_n)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "markers.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster", "rank", "gene_id", "importance"])
        for c in sorted(tables):
            for rank, (gene, imp) in enumerate(tables[c], start=1):
                w.writerow([c, rank, gene, "%.17g" % imp])
    _write_manifest(args, cfg, extra={"top_n": args.top_n})
    print(f"ranked markers for {len(tables)} clusters")
    return 0


def cmd_trajectory(args) -> int:
    from .dataio import read_matrix_csv
    from .downstream import paga_connectivity

    cfg = _resolve_config(args)
    _, _, z = read_matrix_csv(args.emb, "embedding")
    _, labels = _read_labels_csv(args.labels)
    paga = paga_connectivity(z, labels, k=args.paga_k)
    os.makedirs(args.out, exist_ok=True)
    edges = []
    ids = paga.cluster_ids
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            edges.append({"c": ids[i], "d": ids[j], "connectivity": float(paga.connectivity[i, j])})
    with open(os.path.join(args.out, "paga.json"), "w", encoding="utf-8") as fh:
        json.dump({"cluster_ids": ids, "edges": edges}, fh, indent=2)
        fh.write("\n")
    _write_manifest(args, cfg, extra={"paga_k": args.paga_k})
    print(f"connectivity over {len(ids)} clusters")
    return 0


def cmd_evaluate(args) -> int:
    from .dataio import read_matrix_csv
    from .evaluate import ari, mrre
    from .preprocess import preprocess_dataset

    ds = _load_data(args)
    cfg = _resolve_config(args)
    _, ids, z = read_matrix_csv(args.emb, "embedding")
    pre = preprocess_dataset(ds, cfg)
    metrics = {}
    k = min(args.mrre_k, (len(ids) - 1) // 2)
    if k >= 1 and len(ids) >= k + 2:
        metrics["mrre"] = mrre(pre.tra, z, k)
    if args.labels and ds.labels is not None:
        _, predicted = _read_labels_csv(args.labels)
        metrics["ari"] = ari(ds.labels, predicted)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "metrics.json"), "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2)
        fh.write("\n")
    _write_manifest(args, cfg, extra={"metrics": metrics})
    print(json.dumps(metrics))
    return 0


def cmd_report(args) -> int:
    import numpy as np

    from .dataio import AnalysisReport, write_report
    from .downstream import (
        _fit_vis,
        deconvolve,
        gmm_cluster,
        marker_tables,
        paga_connectivity,
        refine_labels,
    )
    from .evaluate import ari, modality_contribution, mrre
    from .network import save_checkpoint

    ds = _load_data(args)
    cfg = _resolve_config(args)
    pre, spatial, eps, state, emb = _train_once(ds, cfg)

    k = _resolve_n_clusters(cfg, ds)
    model = gmm_cluster(emb.z, k, restarts=args.restarts, rng=np.random.default_rng([cfg.seed, 3]))
    labels = model.labels
    if cfg.refine:
        labels = refine_labels(labels, ds.coords)

    vis, vis_history = _fit_vis(emb.z, cfg)
    dec = deconvolve(emb.z, labels, args.l1)
    tables = marker_tables(pre, state.params, spatial, labels, top_n=args.top_n)
    marker_rows = []
    for c in sorted(tables):
        for rank, (gene, imp) in enumerate(tables[c], start=1):
            marker_rows.append((c, rank, gene, imp))
    paga = None
    if len(set(labels.tolist())) >= 2:
        paga = paga_connectivity(emb.z, labels, k=args.paga_k)

    metrics = {}
    mk = min(args.mrre_k, (ds.n_spots - 1) // 2)
    if mk >= 1 and ds.n_spots >= mk + 2:
        metrics["mrre"] = mrre(pre.tra, emb.z, mk)
    if ds.labels is not None:
        metrics["ari"] = ari(ds.labels, labels)

    contrib_labels = ds.labels if ds.labels is not None else labels
    contributions = None
    contrib_summary = {}
    if pre.mor is not None and len(set(contrib_labels.tolist())) >= 2:
        on_inputs = modality_contribution(
            [pre.tra, pre.mor], contrib_labels, names=["tra", "mor"], seed=cfg.seed
        )
        on_embeddings = modality_contribution(
            [emb.y_tra, emb.y_mor], contrib_labels, names=["tra", "mor"], seed=cfg.seed
        )
        contrib_summary = {
            "inputs": {"summary": on_inputs.summary, "train_accuracy": on_inputs.train_accuracy},
            "embeddings": {
                "summary": on_embeddings.summary,
                "train_accuracy": on_embeddings.train_accuracy,
            },
        }
        contributions = {
            "names": ["tra_input", "mor_input", "tra_emb", "mor_emb"],
            "per_spot": np.column_stack([on_inputs.per_spot, on_embeddings.per_spot]),
            **contrib_summary,
        }

    paga_edges = None
    if paga is not None:
        paga_edges = []
        ids = paga.cluster_ids
        for i in range(len(ids)):
            for j in range(i + 1, len(ids)):
                paga_edges.append(
                    {"c": ids[i], "d": ids[j], "connectivity": float(paga.connectivity[i, j])}
                )

    report = AnalysisReport(
        spot_ids=ds.spot_ids,
        embedding=emb.z,
        labels=labels,
        coords=ds.coords,
        vis=vis,
        metrics=metrics,
        loss_history=state.history,
        paga_edges=paga_edges,
        markers=marker_rows,
        deconvolution={"cluster_ids": dec.cluster_ids, "weights": dec.weights, "impurity": dec.impurity},
        contributions=contributions,
        notes={
            "epsilon_used": eps,
            "isolated_nodes": len(spatial.isolated),
            "augment_fallbacks": state.notes.get("augment_fallbacks", 0),
            "n_clusters": k,
            "deconvolution_converged": dec.converged,
            "vis_final_loss": vis_history[-1],
        },
        config=cfg.to_dict(),
    )
    write_report(report, args.out)
    save_checkpoint(state.params, os.path.join(args.out, "ckpt.json"))
    _write_manifest(args, cfg, extra={"n_clusters": k, "epsilon_used": eps})
    summary = {key: round(val, 4) for key, val in metrics.items()}
    print(f"report written to {args.out} {json.dumps(summary)}")
    return 0


_HANDLERS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "cluster": cmd_cluster,
    "visualize": cmd_visualize,
    "deconvolve": cmd_deconvolve,
    "markers": cmd_markers,
    "trajectory": cmd_trajectory,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def run(argv) -> int:
    _pin_threads(argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        args._argv = list(argv)
        return _HANDLERS[args.command](args)
    except CliError as e:
        print(f"topofuse: {e}", file=sys.stderr)
        return 1
    except TopofuseError as e:
        print(f"topofuse: error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # argparse --help / --version
        code = e.code
        return 0 if code is None else int(code)
    except Exception:
        import traceback

        traceback.print_exc()
        return 2


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
