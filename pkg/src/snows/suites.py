"""Oracle suites: production paths checked against the brute-force references.

Each suite returns ``CheckRow``s; a suite passes when every row does.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List

import numpy as np

from snows import masks as M
from snows import netgraph, newton, oracles, recon, solver, vit, zoo
from snows import tensor as T

logger = logging.getLogger(__name__)

HVP_EXACT_TOL = 1e-6
HVP_FD_TOL = 1e-4
CG_TOL = 1e-6
K0_TOL = 1e-6


@dataclass(frozen=True)
class CheckRow:
    suite: str
    name: str
    measured: float
    tolerance: float
    passed: bool

    def to_dict(self):
        return asdict(self)


def check(suite: str, name: str, measured: float, tolerance: float) -> CheckRow:
    passed = bool(np.isfinite(measured) and measured <= tolerance)
    if not passed:
        logger.warning("%s/%s failed: %.3e > %.3e", suite, name, measured, tolerance)
    return CheckRow(suite, name, float(measured), float(tolerance), passed)


def _perturbed(task: recon.ReconstructionTask, rng: np.random.Generator, scale: float = 0.1) -> np.ndarray:
    """Masked starting weights moved off the dense solution on the active set."""
    w = task.initial_weights()
    noise = solver.scatter(task, rng.standard_normal(task.m) * scale)
    return (w + noise).astype(task.dtype)


def _mlp_task(rng: T.Rng, index: int) -> recon.ReconstructionTask:
    doc = zoo.manifest(
        (4,),
        [
            zoo.op("fc0", "dense", weights=("fc0.weight", "fc0.bias")),
            zoo.op("act0", "gelu", target=True),
            zoo.op("fc1", "dense", weights=("fc1.weight",), target=True),
        ],
        {"fc0.weight": (4, 6), "fc0.bias": (6,), "fc1.weight": (6, 3)},
        ["fc0.weight", "fc1.weight"],
    )
    g = netgraph.NetworkGraph.from_manifest(doc, zoo.init_weights(doc, rng.child(f"mlp{index}")))
    x = rng.child(f"mlp{index}").normal((5, 4))
    mask = M.magnitude_mask_nm(g.weights["fc0.weight"], 2, 4)
    return recon.build_task(g, ["fc0.weight"], x, 1, [mask])


def _conv_task(rng: T.Rng, index: int) -> recon.ReconstructionTask:
    doc = zoo.manifest(
        (2, 4, 4),
        [
            zoo.op("conv0", "conv2d", {"padding": 1}, ("conv0.weight",)),
            zoo.op("act0", "gelu", target=True),
            zoo.op("pool", "avgpool", {"kernel": 2}, target=True),
        ],
        {"conv0.weight": (2, 2, 3, 3)},
        ["conv0.weight"],
    )
    g = netgraph.NetworkGraph.from_manifest(doc, zoo.init_weights(doc, rng.child(f"conv{index}")))
    x = rng.child(f"conv{index}").normal((3, 2, 4, 4))
    mask = M.magnitude_mask_unstructured(g.weights["conv0.weight"], 0.3)
    return recon.build_task(g, ["conv0.weight"], x, 1, [mask])


def _attention_task(rng: T.Rng, index: int) -> recon.ReconstructionTask:
    spec = vit.AttentionBlockSpec(d=4, heads=2, head_dim=2, seq=3, mlp_hidden=4)
    block = vit.build_attention_block(spec, n=2, seed=int(rng.child(f"attn{index}").integers(0, 2**31)))
    masks = [M.magnitude_mask_unstructured(block.graph.weights[n], 0.25) for n in vit.QKV]
    return vit.qkv_joint_task(block, 0, masks)


def random_tasks(seed: int = 0, count: int = 21) -> List[recon.ReconstructionTask]:
    """Small double-precision tasks cycling through MLP, conv and attention sub-networks."""
    rng = T.Rng(seed)
    builders = (_mlp_task, _conv_task, _attention_task)
    return [builders[i % 3](rng, i) for i in range(count)]


def hvp_suite(seed: int = 0, count: int = 21) -> List[CheckRow]:
    rows = []
    stream = T.Rng(seed).stream("hvp")
    for i, task in enumerate(random_tasks(seed, count)):
        w = _perturbed(task, stream)
        reference = oracles.fd_hessian(task, w)
        v = stream.standard_normal(task.m)
        expected = reference @ v
        exact = solver.hvp(task, w, v)
        approx = solver.hvp(task, w, v, eps_fd=solver.default_fd_epsilon(task.dtype))
        label = f"{i}:{task.label}"
        rows.append(check("hvp", f"exact {label}", oracles.rel_err(exact, expected), HVP_EXACT_TOL))
        rows.append(check("hvp", f"fd {label}", oracles.rel_err(approx, expected), HVP_FD_TOL))
    return rows


def positive_shift(h: np.ndarray, margin: float = 0.1) -> float:
    """Damping that lifts the smallest eigenvalue of ``h`` to ``margin`` times its spectral radius."""
    eigenvalues = np.linalg.eigvalsh(h)
    radius = max(float(np.max(np.abs(eigenvalues))), 1.0)
    return max(0.0, -float(eigenvalues[0])) + margin * radius


def cg_suite(seed: int = 0, count: int = 20) -> List[CheckRow]:
    rows = []
    rng = T.Rng(seed).stream("cg")
    for i in range(count):
        m = int(rng.integers(2, 201))
        basis = rng.standard_normal((m, m))
        h = basis.T @ basis / m
        g = rng.standard_normal(m)
        lam = 0.1
        reference = oracles.direct_newton(oracles.DenseSystem(h, g), lam)
        report = solver.conjugate_gradient(lambda v: h @ v, g, 1e-10, 10 * m, lam)
        rows.append(check("cg", f"system {i} (m={m})", oracles.rel_err(report.solution, reference), CG_TOL))
    stream = T.Rng(seed).stream("cg-tasks")
    for i, task in enumerate(random_tasks(seed, 3)):
        w = _perturbed(task, stream)
        system = oracles.brute_hessian(task, w)
        cfg = solver.CgConfig(tol=1e-10, max_iters=10 * task.m, lam=positive_shift(system.h))
        report = solver.cg_solve(task, w, system.g, cfg)
        reference = oracles.direct_newton(system, cfg.lam)
        rows.append(check("cg", f"task {task.label}", oracles.rel_err(report.solution, reference), CG_TOL))
    return rows


def _k0_dense_task(seed: int) -> recon.ReconstructionTask:
    rng = T.Rng(seed)
    doc = zoo.manifest(
        (8,),
        [zoo.op("fc", "dense", weights=("fc.weight", "fc.bias"), target=True)],
        {"fc.weight": (8, 3), "fc.bias": (3,)},
        ["fc.weight"],
    )
    g = netgraph.NetworkGraph.from_manifest(doc, zoo.init_weights(doc, rng))
    g = g.replace_weights({"fc.bias": rng.normal((3,))})
    mask = M.magnitude_mask_nm(g.weights["fc.weight"], 2, 4)
    return recon.build_task(g, ["fc.weight"], rng.normal((32, 8)), 0, [mask])


def _k0_conv_task(seed: int) -> recon.ReconstructionTask:
    rng = T.Rng(seed)
    doc = zoo.manifest(
        (4, 5, 5),
        [zoo.op("conv", "conv2d", {"padding": 1}, ("conv.weight",), target=True)],
        {"conv.weight": (2, 4, 3, 3)},
        ["conv.weight"],
    )
    g = netgraph.NetworkGraph.from_manifest(doc, zoo.init_weights(doc, rng))
    mask = M.magnitude_mask_nm(g.weights["conv.weight"], 2, 4)
    return recon.build_task(g, ["conv.weight"], rng.normal((6, 4, 5, 5)), 0, [mask])


def k0_suite(seed: int = 0) -> List[CheckRow]:
    """One full-batch damped Newton step against the masked normal equations."""
    rows = []
    lam = 1e-8
    cfg = newton.NewtonConfig(cg=solver.CgConfig(tol=1e-10, max_iters=1000, lam=lam))
    for name, task in (("dense", _k0_dense_task(seed)), ("conv", _k0_conv_task(seed))):
        w0 = task.initial_weights()
        state = newton.NewtonState(w0.copy(), layer=name)
        newton.newton_step(task, state, cfg)
        reference = oracles.closed_form_k0(task, ridge=lam, anchor=w0)
        plain = oracles.closed_form_k0(task)
        rows.append(check("k0", f"{name} newton vs damped normal equations", oracles.rel_err(state.w_hat, reference), K0_TOL))
        rows.append(check("k0", f"{name} newton vs normal equations", oracles.rel_err(state.w_hat, plain), K0_TOL))
    return rows


def toy_quadratic_suite(seed: int = 0) -> List[CheckRow]:
    report = oracles.toy_quadratic(1.0, 100.0, (1.0, 1.0), 0.01, 1e-6)
    numeric = report.sgd_iterations_numeric
    return [
        check("toy-quadratic", "sgd iterations (closed form) == 1375", abs((report.sgd_iterations or 0) - 1375), 0),
        check("toy-quadratic", "sgd iterations (numeric) within 1 of 1375", abs((numeric or 0) - 1375), 1),
        check("toy-quadratic", "newton steps == 1", abs(report.newton_steps - 1), 0),
        check("toy-quadratic", "newton final ||w||", report.newton_final_norm, 1e-12),
        check("toy-quadratic", "condition number == 100", abs(report.kappa - 100.0), 0),
        check("toy-quadratic", "|w2| after one sgd step", abs(report.w2_after_one_sgd_step), 1e-12),
    ]


SUITES: Dict[str, Callable[[int], List[CheckRow]]] = {
    "hvp": hvp_suite,
    "cg": cg_suite,
    "k0": k0_suite,
    "toy-quadratic": toy_quadratic_suite,
}


def run_suite(name: str, seed: int = 0) -> List[CheckRow]:
    if name == "all":
        return [row for suite in SUITES.values() for row in suite(seed)]
    return SUITES[name](seed)


def format_table(rows: List[CheckRow]) -> str:
    width = max([len(r.name) for r in rows] + [4])
    lines = [f"{'suite':<14} {'check':<{width}} {'measured':>12} {'tolerance':>12}  result"]
    for r in rows:
        lines.append(
            f"{r.suite:<14} {r.name:<{width}} {r.measured:>12.3e} {r.tolerance:>12.3e}  "
            f"{'PASS' if r.passed else 'FAIL'}"
        )
    return "\n".join(lines)
