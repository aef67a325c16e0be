"""CSV and manifest writers.  Floats use 17 significant digits; matrices are flattened row-major."""
import csv
import itertools

import numpy as np


def fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def matrix_header(name, shape):
    if len(shape) == 1:
        return [f"{name}_{a + 1}" for a in range(shape[0])]
    return [f"{name}_{a + 1}_{b + 1}" for a, b in itertools.product(range(shape[0]), range(shape[1]))]


def write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_node_tables(path, times, tables):
    """One row per ``(t_k, regime)``; ``tables`` is a list of ``(name, array (N+1, ell, ...))``."""
    header = ["t", "regime"]
    for name, arr in tables:
        header += matrix_header(name, arr.shape[2:])
    ell = tables[0][1].shape[1]
    rows = []
    for k, t in enumerate(times):
        for i in range(ell):
            row = [float(t), i + 1]
            for _, arr in tables:
                row += [float(v) for v in np.ravel(arr[k, i])]
            rows.append(row)
    write_rows(path, header, rows)


def write_riccati(path, solution):
    write_node_tables(path, solution.grid.nodes, [("P", solution.P), ("Lambda", solution.Lambda)])


def write_adjoint(path, solution):
    write_node_tables(path, solution.grid.nodes, [("K", solution.K), ("L", solution.L)])


def write_policy(path, policy):
    write_node_tables(path, policy.grid.nodes, [("Gamma", policy.Gamma), ("phi", policy.phi)])


def write_value(path, report):
    rows = [("V", report.V)] + list(report.terms.items())
    write_rows(path, ["term", "value"], rows)


def write_batch_summary(path, batch):
    write_rows(path, ["paths", "mean", "stderr", "ci99_halfwidth", "blowups"],
               [(batch.paths, batch.mean, batch.stderr, batch.ci99, batch.blowup_count)])


def write_batch_paths(path, batch):
    write_rows(path, ["path", "cost", "penalty", "blown"],
               [(p, c, q, b) for p, (c, q, b) in enumerate(zip(batch.costs, batch.penalties, batch.blown))])


def write_chain_paths(path, paths):
    """``paths`` is a list of :class:`rlq.chain.RegimePath`; regimes are written one-based."""
    rows = []
    for p, rp in enumerate(paths):
        rows += [(p, t, i) for t, i in rp.to_rows()]
    write_rows(path, ["path", "time", "regime"], rows)


def write_manifest(path, entries):
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in entries.items():
            if isinstance(value, (list, tuple)):
                value = ", ".join(fmt(v) for v in value)
            elif isinstance(value, dict):
                value = ", ".join(f"{k}={fmt(v)}" for k, v in value.items())
            fh.write(f"{key}: {fmt(value)}\n")


def read_manifest(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if ":" in line:
                key, value = line.split(":", 1)
                out[key.strip()] = value.strip()
    return out
