"""
Property Suite Module
Executable checks of the mathematical properties the matcher relies on:
permutation and image-swap equivariance of the model, transport marginals
and the partial-assignment constraints of Sinkhorn, agreement with the
exact assignment oracle, and finite-difference gradient checks from single
primitives up to the full loss. Every case is reproducible from its name
and seed; reports are written as JSON and JUnit XML.
"""
import itertools
import logging
import time
import xml.etree.ElementTree as ET
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from modules.autodiff import (
    Tape,
    Var,
    broadcast_to,
    check_gradient,
    concat,
    exp,
    log,
    logsumexp,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    softmax,
    sqrt,
    take,
)
from modules.encoder import encode_keypoints, init_encoder_params
from modules.exporter import save_json
from modules.features import LocalFeatureSet, random_feature_set
from modules.gnn import NodeStates, alternating_edges, gnn_forward, init_gnn_params
from modules.matcher import augment_with_dustbins, extract_matches, hungarian_oracle, sinkhorn
from modules.model import Model, ModelConfig, forward, init_model, match_pair
from modules.synthgen import GroundTruthLabels
from modules.training import nll_loss

logger = logging.getLogger(__name__)

EQUIVARIANCE_TOL = 1e-9
MARGINAL_TOL = 1e-6
PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-4
ORACLE_DISAGREEMENT = 0.05
# Sinkhorn stopping residuals for the converged comparisons
CONVERGED_TOL = 1e-12
TRANSPORT_TOL = 1e-9
ORACLE_TOL = 1e-6


@dataclass
class PropertyCase:
    name: str
    seed: int
    module: str
    tolerance: float
    passed: Optional[bool] = None
    measured: Optional[float] = None
    message: str = ""
    seconds: float = 0.0

    def to_dict(self) -> dict:
        data = asdict(self)
        if self.measured is not None and not np.isfinite(self.measured):
            data["measured"] = None
        return data


# A check draws from the generator and returns the measured error; the case
# passes when it does not exceed the tolerance.
Check = Callable[[np.random.Generator], float]


@dataclass
class _Job:
    case: PropertyCase
    check: Check


def _run(job: _Job) -> PropertyCase:
    case = job.case
    start = time.perf_counter()
    try:
        measured = float(job.check(np.random.default_rng(case.seed)))
        case.measured = measured
        case.passed = bool(measured <= case.tolerance)
        if not case.passed:
            case.message = f"measured {measured:.3e} exceeds tolerance {case.tolerance:.1e}"
    except Exception as exc:  # verdicts carry failures
        case.passed = False
        case.message = f"{type(exc).__name__}: {exc}"
    case.seconds = time.perf_counter() - start
    return case


def run_cases(jobs: Sequence[_Job], workers: int = 1) -> List[PropertyCase]:
    """Run independent cases, reporting in submission order."""
    if workers <= 1:
        cases = [_run(job) for job in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cases = list(pool.map(_run, jobs))
    failed = [c.name for c in cases if not c.passed]
    if failed:
        logger.warning("%d of %d property cases failed: %s", len(failed), len(cases), ", ".join(failed[:10]))
    else:
        logger.info("%d property cases passed", len(cases))
    return cases


# ---------------------------------------------------------------------------
# equivariance
# ---------------------------------------------------------------------------

def _augmented_order(order: np.ndarray) -> np.ndarray:
    return np.r_[order, len(order)]


def permutation_error(model: Model, rng: np.random.Generator, max_keypoints: int = 8) -> float:
    """max |P(sigma A, tau B) - P(A, B)[sigma, tau]| over the augmented matrix."""
    dim = model.config.descriptor_dim
    a = random_feature_set(rng, int(rng.integers(2, max_keypoints + 1)), dim)
    b = random_feature_set(rng, int(rng.integers(2, max_keypoints + 1)), dim)
    sigma = rng.permutation(a.num_keypoints)
    tau = rng.permutation(b.num_keypoints)
    p = match_pair(model, a, b).p_bar
    p_permuted = match_pair(model, a.permuted(sigma), b.permuted(tau)).p_bar
    expected = p[np.ix_(_augmented_order(sigma), _augmented_order(tau))]
    return float(np.abs(p_permuted - expected).max())


def image_swap_error(model: Model, rng: np.random.Generator, max_keypoints: int = 8) -> float:
    """max |P(B, A) - P(A, B)^T| with both Sinkhorn runs converged."""
    dim = model.config.descriptor_dim
    a = random_feature_set(rng, int(rng.integers(2, max_keypoints + 1)), dim)
    b = random_feature_set(rng, int(rng.integers(2, max_keypoints + 1)), dim)
    forward_run = match_pair(model, a, b, sinkhorn_tolerance=CONVERGED_TOL)
    swapped = match_pair(model, b, a, sinkhorn_tolerance=CONVERGED_TOL)
    return float(np.abs(swapped.p_bar - forward_run.p_bar.T).max())


def run_equivariance_suite(model: Model, trials: int = 100, seed: int = 0, workers: int = 1) -> List[PropertyCase]:
    jobs = []
    for k in range(trials):
        jobs.append(_Job(
            PropertyCase(f"equivariance.permutation[{k}]", seed + k, "model", EQUIVARIANCE_TOL),
            lambda rng: permutation_error(model, rng),
        ))
        jobs.append(_Job(
            PropertyCase(f"equivariance.image_swap[{k}]", seed + k, "model", EQUIVARIANCE_TOL),
            lambda rng: image_swap_error(model, rng),
        ))
    return run_cases(jobs, workers)


# ---------------------------------------------------------------------------
# transport
# ---------------------------------------------------------------------------

def _assignment(s_bar: np.ndarray, iterations: int = 100, tolerance: Optional[float] = None):
    tape = Tape()
    return sinkhorn(tape.constant(s_bar), iterations, tolerance)


def _sizes(rng: np.random.Generator, min_size: int, max_size: int) -> Tuple[int, int]:
    m, n = rng.integers(min_size, max_size + 1, size=2)
    return int(m), int(n)


def marginal_residual(rng: np.random.Generator, min_size: int = 2, max_size: int = 12) -> float:
    m, n = _sizes(rng, min_size, max_size)
    assignment = _assignment(rng.uniform(-5.0, 5.0, size=(m + 1, n + 1)), tolerance=TRANSPORT_TOL)
    return max(assignment.row_residual, assignment.column_residual)


def partial_assignment_violation(rng: np.random.Generator, min_size: int = 2, max_size: int = 12) -> float:
    """Largest breach of P >= 0, row sums <= 1 and column sums <= 1 on the interior."""
    m, n = _sizes(rng, min_size, max_size)
    p = _assignment(rng.uniform(-5.0, 5.0, size=(m + 1, n + 1)), tolerance=TRANSPORT_TOL).interior
    return float(max(
        (-p).max(initial=0.0),
        (p.sum(axis=1) - 1.0).max(initial=0.0),
        (p.sum(axis=0) - 1.0).max(initial=0.0),
    ))


def transpose_error(rng: np.random.Generator, min_size: int = 2, max_size: int = 12) -> float:
    """max |P(S^T) - P(S)^T| for square S, both runs converged."""
    size = int(rng.integers(min_size, max_size + 1))
    s_bar = rng.uniform(-2.0, 2.0, size=(size + 1, size + 1))
    p = _assignment(s_bar, tolerance=CONVERGED_TOL)
    p_t = _assignment(s_bar.T, tolerance=CONVERGED_TOL)
    return float(np.abs(p_t.values - p.values.T).max())


def uniform_error(rng: np.random.Generator) -> float:
    value = rng.uniform(-5.0, 5.0)
    return float(np.abs(_assignment(np.full((2, 2), value)).values - 0.5).max())


def _optimum_is_unique(scores: np.ndarray) -> bool:
    totals = sorted(
        (sum(scores[i, j] for i, j in enumerate(perm)) for perm in itertools.permutations(range(scores.shape[1]))),
        reverse=True,
    )
    return len(totals) < 2 or totals[0] != totals[1]


def oracle_disagreement(rng: np.random.Generator, instances: int = 200, size: int = 5, scale: float = 100.0) -> float:
    """
    Share of low-entropy instances where mutual-argmax extraction differs
    from the exact optimum; instances with tied optima are skipped.
    """
    agree = counted = 0
    for _ in range(instances):
        scores = scale * rng.uniform(0.0, 1.0, size=(size, size))
        if not _optimum_is_unique(scores):
            continue
        s_bar = np.zeros((size + 1, size + 1))
        s_bar[:size, :size] = scores
        extracted = extract_matches(_assignment(s_bar, tolerance=ORACLE_TOL), threshold=0.0).pairs
        counted += 1
        agree += extracted == set(hungarian_oracle(scores))
    return 1.0 - agree / counted if counted else 1.0


def run_transport_suite(trials: int = 200, seed: int = 0, workers: int = 1) -> List[PropertyCase]:
    jobs = [_Job(PropertyCase("transport.uniform_1x1", seed, "matcher", 1e-12), uniform_error)]
    for k in range(trials):
        jobs.append(_Job(PropertyCase(f"transport.marginals[{k}]", seed + k, "matcher", MARGINAL_TOL),
                         marginal_residual))
        jobs.append(_Job(PropertyCase(f"transport.partial[{k}]", seed + k, "matcher", MARGINAL_TOL),
                         partial_assignment_violation))
    for k in range(min(trials, 100)):
        jobs.append(_Job(PropertyCase(f"transport.transpose[{k}]", seed + k, "matcher", EQUIVARIANCE_TOL),
                         transpose_error))
    jobs.append(_Job(PropertyCase("transport.oracle_agreement", seed, "matcher", ORACLE_DISAGREEMENT),
                     oracle_disagreement))
    return run_cases(jobs, workers)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def _scalar(out: Var) -> Var:
    """Reduce to a scalar with fixed pseudo-random weights so every entry matters."""
    weights = np.random.default_rng(out.size).standard_normal(out.shape)
    return reduce_sum(out * out.tape.constant(weights))


def primitive_graphs(rng: np.random.Generator) -> Dict[str, Tuple[Callable, Dict[str, np.ndarray]]]:
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    c = rng.standard_normal((4, 2))
    row = rng.standard_normal((1, 4))
    positive = rng.uniform(0.5, 2.0, size=(3, 4))
    rows, cols = np.array([0, 2, 2]), np.array([1, 3, 3])
    return {
        "add": (lambda x: _scalar(x["a"] + x["row"]), {"a": a, "row": row}),
        "sub": (lambda x: _scalar(x["a"] - x["b"]), {"a": a, "b": b}),
        "mul": (lambda x: _scalar(x["a"] * x["b"]), {"a": a, "b": b}),
        "div": (lambda x: _scalar(x["a"] / x["p"]), {"a": a, "p": positive}),
        "neg": (lambda x: _scalar(-x["a"]), {"a": a}),
        "matmul": (lambda x: _scalar(x["a"] @ x["c"]), {"a": a, "c": c}),
        "transpose": (lambda x: _scalar(x["a"].T), {"a": a}),
        "concat": (lambda x: _scalar(concat([x["a"], x["b"]], axis=1)), {"a": a, "b": b}),
        "relu": (lambda x: _scalar(relu(x["a"])), {"a": a}),
        "exp": (lambda x: _scalar(exp(x["a"])), {"a": a}),
        "log": (lambda x: _scalar(log(x["p"])), {"p": positive}),
        "sqrt": (lambda x: _scalar(sqrt(x["p"])), {"p": positive}),
        "softmax": (lambda x: _scalar(softmax(x["a"], axis=1)), {"a": a}),
        "logsumexp": (lambda x: _scalar(logsumexp(x["a"], axis=0)), {"a": a}),
        "reduce_sum": (lambda x: _scalar(reduce_sum(x["a"], axis=1)), {"a": a}),
        "reduce_mean": (lambda x: _scalar(reduce_mean(x["a"], axis=0, keepdims=True)), {"a": a}),
        "take": (lambda x: _scalar(take(x["a"], (rows, cols))), {"a": a}),
        "broadcast_to": (lambda x: _scalar(broadcast_to(x["row"], (3, 4))), {"row": row}),
        "reshape": (lambda x: _scalar(reshape(x["a"], (4, 3))), {"a": a}),
    }


def _tape_of(bindings) -> Tape:
    return next(iter(bindings.values())).tape


def encoder_gradient_error(rng: np.random.Generator) -> float:
    dim, hidden = 8, (16, 16)
    params = init_encoder_params(rng, dim, True, hidden)
    positions = rng.uniform(-0.5, 0.5, size=(5, 3))
    descriptors = rng.standard_normal((5, dim))

    def graph(x):
        tape = _tape_of(x)
        return _scalar(encode_keypoints(tape.constant(positions), tape.constant(descriptors), x, True, len(hidden) + 1))

    return _checked(graph, params)


def gnn_gradient_error(rng: np.random.Generator) -> float:
    """One self block and one cross block plus the final projection."""
    dim, heads = 8, 2
    edges = alternating_edges(1)
    params = init_gnn_params(rng, dim, edges, heads, True)
    states_a = rng.standard_normal((5, dim))
    states_b = rng.standard_normal((4, dim))

    def graph(x):
        tape = _tape_of(x)
        out = gnn_forward(NodeStates(tape.constant(states_a), tape.constant(states_b)), x, edges, heads)
        return _scalar(concat([out.f_a, out.f_b], axis=0))

    return _checked(graph, params)


def sinkhorn_gradient_error(rng: np.random.Generator, iterations: int = 20) -> float:
    point = {"scores": rng.uniform(-2.0, 2.0, size=(4, 5)), "z": np.array([0.5])}

    def graph(x):
        return _scalar(sinkhorn(augment_with_dustbins(x["scores"], x["z"]), iterations).log_p_bar)

    return _checked(graph, point)


def toy_pair(
    rng: np.random.Generator, dim: int, matched: int = 3, extra: int = 1
) -> Tuple[LocalFeatureSet, LocalFeatureSet, GroundTruthLabels]:
    """Small labeled pair: matched keypoints shuffled into B, one distractor per side."""
    size = (64.0, 48.0)
    a = random_feature_set(rng, matched + extra, dim, size)
    order = rng.permutation(matched)
    distractor = random_feature_set(rng, extra, dim, size)
    keypoints_b = np.vstack([
        np.column_stack([np.clip(a.positions[order] + rng.normal(0, 0.5, (matched, 2)), 0, np.array(size) - 1), rng.uniform(0, 1, matched)]),
        distractor.keypoints,
    ])
    noisy = a.descriptors[order] + 0.1 * rng.standard_normal((matched, dim))
    noisy /= np.linalg.norm(noisy, axis=1, keepdims=True)
    b = LocalFeatureSet(size, keypoints_b, np.vstack([noisy, distractor.descriptors]))
    labels = GroundTruthLabels(
        tuple(sorted((int(order[l]), l) for l in range(matched))),
        tuple(range(matched, matched + extra)),
        tuple(range(matched, matched + extra)),
    )
    return a, b, labels


def full_loss_gradient_error(rng: np.random.Generator, max_coordinates: int = 8) -> float:
    config = ModelConfig(descriptor_dim=8, num_layers=2, heads=2, sinkhorn_iterations=20)
    model = init_model(config, rng)
    a, b, labels = toy_pair(rng, config.descriptor_dim)

    def graph(x):
        return nll_loss(forward(x, a, b, config).assignment, labels)

    return _checked(graph, model.params, max_coordinates=max_coordinates, seed=int(rng.integers(1 << 31)))


def _checked(graph, point, max_coordinates: Optional[int] = None, seed: int = 0) -> float:
    result = check_gradient(graph, point, max_coordinates=max_coordinates, seed=seed)
    if result.checked == 0:
        return float("inf")
    return result.max_error


def run_gradient_suite(trials: int = 3, seed: int = 0, workers: int = 1) -> List[PropertyCase]:
    jobs = []
    for name in primitive_graphs(np.random.default_rng(seed)):
        jobs.append(_Job(
            PropertyCase(f"gradient.primitive.{name}", seed, "autodiff", PRIMITIVE_TOL),
            lambda rng, name=name: _checked(*primitive_graphs(rng)[name]),
        ))
    composites = (
        ("encoder", "encoder", encoder_gradient_error),
        ("gnn", "gnn", gnn_gradient_error),
        ("sinkhorn", "matcher", sinkhorn_gradient_error),
        ("full_loss", "training", full_loss_gradient_error),
    )
    for k in range(trials):
        for name, module, check in composites:
            jobs.append(_Job(PropertyCase(f"gradient.{name}[{k}]", seed + k, module, COMPOSITE_TOL), check))
    return run_cases(jobs, workers)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def run_all(
    model: Optional[Model] = None,
    trials: int = 100,
    gradient_trials: int = 3,
    seed: int = 0,
    workers: int = 1,
) -> Dict[str, List[PropertyCase]]:
    model = model or init_model(ModelConfig(descriptor_dim=32, num_layers=3, heads=4, sinkhorn_iterations=100), seed)
    return {
        "equivariance": run_equivariance_suite(model, trials, seed, workers),
        "transport": run_transport_suite(2 * trials, seed, workers),
        "gradient": run_gradient_suite(gradient_trials, seed, workers),
    }


def summary(suites: Dict[str, List[PropertyCase]]) -> dict:
    cases = [c for group in suites.values() for c in group]
    return {
        "passed": sum(1 for c in cases if c.passed),
        "failed": sum(1 for c in cases if not c.passed),
        "suites": {name: [c.to_dict() for c in group] for name, group in suites.items()},
    }


def to_junit_xml(suites: Dict[str, List[PropertyCase]]) -> str:
    root = ET.Element("testsuites")
    for name, cases in suites.items():
        suite = ET.SubElement(
            root, "testsuite",
            name=name,
            tests=str(len(cases)),
            failures=str(sum(1 for c in cases if not c.passed)),
            time=f"{sum(c.seconds for c in cases):.3f}",
        )
        for case in cases:
            element = ET.SubElement(
                suite, "testcase", classname=f"{name}.{case.module}", name=case.name, time=f"{case.seconds:.3f}"
            )
            if not case.passed:
                failure = ET.SubElement(element, "failure", message=case.message)
                failure.text = f"seed={case.seed} tolerance={case.tolerance} measured={case.measured}"
    return ET.tostring(root, encoding="unicode")


def write_reports(
    suites: Dict[str, List[PropertyCase]], json_path: Optional[str] = None, xml_path: Optional[str] = None
) -> dict:
    report = summary(suites)
    if json_path:
        save_json(report, json_path)
    if xml_path:
        with open(xml_path, "w", encoding="utf-8") as f:
            f.write(to_junit_xml(suites))
        logger.info("JUnit report saved to %s", xml_path)
    return report
