"""Benchmark harness: instance generation, timing runs, result CSVs, and the
randomized equivalence suite for composed versus from-scratch controllers.

Timing hygiene: only the shield-update stage of each step is measured (with a
monotonic clock, inside run_episode); sensing, proposing and stepping stay
outside.  Timed sections are single-threaded so the adaptive and baseline
columns are comparable.
"""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass, field

import numpy as np

from .abstraction import ExplicitAbstraction
from .navsim import NavRuntime, WorldParams, feasible_world, make_sensing_config, run_episode
from .shield import compose, synthesize_bank
from .synthesis import (
    ControllerTable,
    SafetySpec,
    StateSet,
    controller_equal,
    largest_nonblocking,
    product,
    safety_control,
)

# nominal grid widths per preset; the realized grid rounds each dimension to
# the nearest exactly-tiling width
GRID_PRESETS = {
    "coarse": (0.10, 0.10, 0.30),
    "medium": (0.08, 0.08, 0.25),
    "fine": (0.06, 0.06, 0.20),
}

INPUT_ETA = (0.2, 0.5)


@dataclass
class BenchConfig:
    """Full-protocol settings; defaults mirror the experimental setup."""

    preset: str = "coarse"
    instances: int = 70
    seed: int = 0
    max_steps: int = 200
    threads: int = 1
    out_dir: str = "."
    world_params: WorldParams = field(default_factory=WorldParams)

    def __post_init__(self):
        if self.preset not in GRID_PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(GRID_PRESETS)}")
        if self.instances < 1:
            raise ValueError("instances must be positive")
        if self.threads != 1:
            raise ValueError("timed sections run single-threaded; threads must be 1 for bench")


@dataclass
class BenchRow:
    instance_id: int
    avg_computationAdaptive: float
    avg_computationBaseline: float
    steps: int
    interventions: int
    safe: bool


RESULT_HEADER = "instance_id,avg_computationAdaptive,avg_computationBaseline,steps,interventions,safe"


def emit_results(rows, path):
    """Write the results CSV with the fixed header; refuses an empty run."""
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to emit")
    with open(path, "w", newline="") as f:
        f.write(RESULT_HEADER + "\n")
        for r in rows:
            f.write(f"{r.instance_id},{r.avg_computationAdaptive!r},{r.avg_computationBaseline!r},"
                    f"{r.steps},{r.interventions},{r.safe}\n")
    return path


# extra growth of obstacle rectangles (in grid cells) when mapped to unsafe
# columns; lattice-anchored frames already keep quantization consistent
# between steps, so no margin is needed by default
DEFAULT_OBSTACLE_MARGIN_CELLS = 0.0


def build_runtime(preset, obstacle_margin=None, pool=None) -> NavRuntime:
    """Abstraction plus atomic-shield bank for one grid preset."""
    eta = GRID_PRESETS[preset]
    if obstacle_margin is None:
        obstacle_margin = DEFAULT_OBSTACLE_MARGIN_CELLS * eta[0]
    cfg = make_sensing_config(eta=eta, obstacle_margin=obstacle_margin)
    return NavRuntime(cfg, pool=pool)


def run_bench(cfg: BenchConfig, rt: NavRuntime | None = None, modes=("dynamic", "pure-online")):
    """Run the full protocol: per instance, one episode per shield mode on the
    same seed, timing the shield-update stage of each."""
    if rt is None:
        rt = build_runtime(cfg.preset)
    rows = []
    for i in range(cfg.instances):
        world = feasible_world(rt, cfg.seed + 1000 * i + 1, cfg.world_params)
        ep_seed = cfg.seed + 1000 * i + 7
        traces = {}
        for mode in modes:
            traces[mode] = run_episode(world, rt, mode=mode, seed=ep_seed, max_steps=cfg.max_steps)
        dyn = traces.get("dynamic")
        base = traces.get("pure-online")
        ref = dyn or base
        safe = all(t.status in ("goal-reached", "max-steps") for t in traces.values())
        rows.append(BenchRow(
            instance_id=i,
            avg_computationAdaptive=dyn.mean_shield_seconds if dyn else 0.0,
            avg_computationBaseline=base.mean_shield_seconds if base else 0.0,
            steps=len(ref.steps),
            interventions=ref.interventions,
            safe=safe,
        ))
    return rows, rt


# -- randomized equivalence suite ---------------------------------------------


def random_system(rng, max_states=64, max_inputs=4, max_succ=3, out_prob=0.05) -> ExplicitAbstraction:
    """Random finite abstract system for oracle tests."""
    n = int(rng.integers(2, max_states + 1))
    m = int(rng.integers(1, max_inputs + 1))
    post = {}
    out_pairs = []
    for x in range(n):
        for u in range(m):
            if rng.random() < out_prob:
                out_pairs.append((x, u))
                if rng.random() < 0.5:
                    continue  # OUT with empty in-box remainder
            k = int(rng.integers(1, max_succ + 1))
            post[(x, u)] = rng.integers(0, n, size=k).tolist()
    return ExplicitAbstraction.from_map(n, m, post, out_pairs)


def random_state_set(rng, n, density=0.75) -> StateSet:
    return StateSet(rng.random(n) < density)


def brute_force_safety_controller(sys, safe: StateSet):
    """Independent reference: iterated removal of states with no input that
    keeps all successors inside the surviving set.  Plain sets and dicts."""
    survivors = set(int(i) for i in safe.indices())
    while True:
        keep = set()
        for x in survivors:
            for u in range(sys.n_inputs):
                succ, is_out = sys.post(x, u)
                if is_out:
                    continue
                if all(int(s) in survivors for s in succ):
                    keep.add(x)
                    break
        if keep == survivors:
            break
        survivors = keep
    allowed = {}
    for x in survivors:
        us = []
        for u in range(sys.n_inputs):
            succ, is_out = sys.post(x, u)
            if not is_out and all(int(s) in survivors for s in succ):
                us.append(u)
        allowed[x] = us
    return survivors, allowed


def brute_force_nonblocking(sys, domain, allowed):
    """Independent reference for deadlock removal: iteratively delete blocking
    states and inputs that dangle outside the shrinking domain."""
    dom = set(domain)
    allow = {x: list(us) for x, us in allowed.items() if x in dom}
    while True:
        changed = False
        for x in list(dom):
            us = []
            for u in allow.get(x, []):
                succ, is_out = sys.post(x, u)
                if not is_out and all(int(s) in dom for s in succ):
                    us.append(u)
            if us:
                allow[x] = us
            else:
                dom.discard(x)
                allow.pop(x, None)
                changed = True
        if not changed:
            break
    return dom, allow


def table_matches_brute(table: ControllerTable, dom, allow) -> bool:
    if set(int(i) for i in np.nonzero(table.defined)[0]) != set(dom):
        return False
    for x in dom:
        if list(table.allowed_indices(x)) != sorted(allow[x]):
            return False
    return True


def oracle_trial(rng, n_specs=2) -> bool:
    """One equivalence check: composed atomic controllers versus from-scratch
    synthesis on the intersection, plus the brute-force reference."""
    sys = random_system(rng)
    safes = [random_state_set(rng, sys.n_states) for _ in range(n_specs)]
    tables = [safety_control(sys, SafetySpec(s)) for s in safes]

    combined = safes[0]
    for s in safes[1:]:
        combined = combined & s
    direct = safety_control(sys, SafetySpec(combined))

    order = list(range(n_specs))
    rng.shuffle(order)
    raw = tables[order[0]]
    for i in order[1:]:
        raw = product(raw, tables[i])
    composed = largest_nonblocking(sys, raw)

    if not controller_equal(composed, direct):
        return False

    dom, allow = brute_force_safety_controller(sys, combined)
    if not table_matches_brute(direct, dom, allow):
        return False

    bdom, ballow = brute_force_safety_controller(sys, safes[0])
    if not table_matches_brute(tables[0], bdom, ballow):
        return False
    return True


def run_oracle_trials(trials, seed=0, spec_counts=(2, 2, 3, 2, 4)):
    """Run the randomized equivalence suite; returns (passed, failed)."""
    rng = np.random.default_rng(seed)
    counts = itertools.cycle(spec_counts)
    passed = failed = 0
    for _ in range(trials):
        if oracle_trial(rng, n_specs=next(counts)):
            passed += 1
        else:
            failed += 1
    return passed, failed


def out_dir_from(flag_value):
    """PARASHIELD_OUT overrides the --out flag."""
    return os.environ.get("PARASHIELD_OUT", flag_value)
