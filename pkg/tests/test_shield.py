import numpy as np
import pytest

from parashield.abstraction import InputGrid
from parashield.bench import random_state_set, random_system
from parashield.errors import AbstractionMismatch, DomainViolation, EmptyActiveSet
from parashield.shield import (
    AtomicShieldBank,
    Shield,
    compose,
    load_bank,
    pure_online_shield,
    save_bank,
    shield_apply,
    synthesize_bank,
)
from parashield.synthesis import (
    ControllerTable,
    SafetySpec,
    closure_holds,
    controller_equal,
    safety_control,
)


@pytest.fixture
def automaton7_bank(automaton7):
    sysm, g, h = automaton7
    return synthesize_bank(sysm, [g, h])


class TestSynthesizeBank:
    def test_automaton7_bank_tables(self, automaton7, automaton7_bank):
        sysm, g, h = automaton7
        assert controller_equal(automaton7_bank.table(0), safety_control(sysm, SafetySpec(g)))
        assert controller_equal(automaton7_bank.table(1), safety_control(sysm, SafetySpec(h)))

    def test_universe_atomic_is_all_permissive(self, automaton7):
        sysm, _, _ = automaton7
        from parashield.synthesis import StateSet
        bank = synthesize_bank(sysm, [StateSet.full(7)])
        t = bank.table(0)
        assert t.domain_size() == 7
        assert all(len(t.allowed_indices(x)) == 2 for x in range(7))

    def test_delta_storage_matches_dense(self, rng):
        sysm = random_system(rng, max_states=40)
        base = random_state_set(rng, sysm.n_states, density=0.95)
        atomics = [base] + [base & random_state_set(rng, sysm.n_states) for _ in range(4)]
        dense = synthesize_bank(sysm, atomics)
        delta = synthesize_bank(sysm, atomics, base_id=0)
        for i in range(len(atomics)):
            assert controller_equal(dense.table(i), delta.table(i))

    def test_delta_requires_sub_controllers(self, automaton7):
        sysm, g, h = automaton7
        # base controller (for the intersection) is strictly below the other
        # atomic's controller, so delta storage must refuse
        with pytest.raises(ValueError):
            synthesize_bank(sysm, [g & h, g], base_id=0)

    def test_thread_pool_synthesis_matches_serial(self, rng):
        from concurrent.futures import ThreadPoolExecutor
        sysm = random_system(rng, max_states=48)
        base = random_state_set(rng, sysm.n_states, density=0.95)
        atomics = [base] + [base & random_state_set(rng, sysm.n_states) for _ in range(6)]
        serial = synthesize_bank(sysm, atomics, base_id=0)
        with ThreadPoolExecutor(max_workers=3) as pool:
            threaded = synthesize_bank(sysm, atomics, base_id=0, pool=pool)
        for i in range(len(atomics)):
            assert controller_equal(serial.table(i), threaded.table(i))


class TestCompose:
    def test_automaton7_pair(self, automaton7, automaton7_bank):
        sh = compose(automaton7_bank, {0, 1})
        assert sorted(sh.table.domain().indices()) == [0, 1, 2, 3]
        assert closure_holds(automaton7[0], sh.table)

    def test_single_atomic_is_identity(self, automaton7_bank):
        sh = compose(automaton7_bank, {0})
        assert controller_equal(sh.table, automaton7_bank.table(0))

    def test_empty_active_rejected(self, automaton7_bank):
        with pytest.raises(EmptyActiveSet):
            compose(automaton7_bank, set())

    def test_equals_direct_synthesis_random(self, rng):
        for _ in range(25):
            sysm = random_system(rng)
            atomics = [random_state_set(rng, sysm.n_states) for _ in range(4)]
            bank = synthesize_bank(sysm, atomics)
            k = int(rng.integers(1, 5))
            active = list(rng.choice(4, size=k, replace=False))
            sh = compose(bank, active)
            safe = atomics[active[0]]
            for i in active[1:]:
                safe = safe & atomics[i]
            assert controller_equal(sh.table, safety_control(sysm, SafetySpec(safe)))

    def test_order_independence(self, rng):
        sysm = random_system(rng)
        atomics = [random_state_set(rng, sysm.n_states) for _ in range(4)]
        bank = synthesize_bank(sysm, atomics)
        perms = [(0, 1, 2, 3), (3, 1, 0, 2), (2, 3, 1, 0)]
        tables = [compose(bank, p).table for p in perms]
        assert controller_equal(tables[0], tables[1])
        assert controller_equal(tables[0], tables[2])


class TestPureOnline:
    def test_equals_compose(self, automaton7, automaton7_bank):
        sysm, g, h = automaton7
        sh = pure_online_shield(sysm, [g, h])
        assert controller_equal(sh.table, compose(automaton7_bank, {0, 1}).table)

    def test_universe_all_permissive(self, automaton7):
        sysm, _, _ = automaton7
        from parashield.synthesis import StateSet
        sh = pure_online_shield(sysm, [StateSet.full(7)])
        assert sh.table.domain_size() == 7


class TestShieldApply:
    def make_shield(self, allowed_rows, points):
        n, m = allowed_rows.shape
        table = ControllerTable.from_bool(np.ones(n, dtype=bool), allowed_rows)
        return Shield(table, InputGrid(points))

    def test_pass_through_when_allowed(self):
        sh = self.make_shield(np.array([[True, True]]), [[-0.2, 0.0], [0.2, 0.0]])
        d = shield_apply(sh, 0, (0.19, 0.0))
        assert not d.intervened and d.proposed_allowed
        assert tuple(d.u) == (0.2, 0.0)

    def test_automaton7c_override_at_a(self, automaton7, automaton7_bank):
        sh = compose(automaton7_bank, {0, 1})
        d = shield_apply(sh, 0, (1.0,))  # input index 1 of the abstract grid
        assert d.intervened and not d.proposed_allowed
        assert d.u_index == 0

    def test_nearest_and_tie_break(self):
        pts = [[-0.2, 0.0], [0.0, 0.0], [0.2, 0.0]]
        allowed = np.array([[True, False, True]])
        sh = self.make_shield(allowed, pts)
        assert tuple(shield_apply(sh, 0, (0.1, 0.0)).u) == (0.2, 0.0)
        # equidistant override resolves to the lowest input index
        assert tuple(shield_apply(sh, 0, (0.0, 0.0)).u) == (-0.2, 0.0)

    def test_domain_violation(self, automaton7, automaton7_bank):
        sh = compose(automaton7_bank, {0, 1})
        with pytest.raises(DomainViolation):
            shield_apply(sh, 5, (0.0,))

    def test_minimal_intervention_predicate(self, automaton7, automaton7_bank, rng):
        sh = compose(automaton7_bank, {0, 1})
        for cell in sh.table.domain().indices():
            for raw in rng.uniform(-0.2, 1.2, size=8):
                d = shield_apply(sh, int(cell), (raw,))
                snapped = sh.inputs.nearest((raw,))
                assert d.intervened == (not sh.table.allows(int(cell), snapped))
                assert d.intervened == (not d.proposed_allowed)
                assert sh.table.allows(int(cell), d.u_index)


class TestAbstractShieldedRuns:
    def test_adversarial_walk_stays_in_domain_and_safe(self, automaton7, automaton7_bank, rng):
        sysm, g, h = automaton7
        sh = compose(automaton7_bank, {0, 1})
        safe = g & h
        dom = sh.table.domain()
        for start in dom.indices():
            cell = int(start)
            for _ in range(30):
                proposed = rng.uniform(-0.5, 1.5, size=1)
                d = shield_apply(sh, cell, proposed)
                succ, is_out = sysm.post(cell, d.u_index)
                assert not is_out
                cell = int(rng.choice(succ))  # adversarial nondeterminism
                assert cell in dom
                assert cell in safe

    def test_adversarial_walk_on_random_banks(self, rng):
        for _ in range(10):
            sysm = random_system(rng)
            atomics = [random_state_set(rng, sysm.n_states) for _ in range(3)]
            bank = synthesize_bank(sysm, atomics)
            sh = compose(bank, {0, 1, 2})
            dom = sh.table.domain()
            if not len(dom):
                continue
            cell = int(rng.choice(dom.indices()))
            for _ in range(40):
                d = shield_apply(sh, cell, rng.uniform(0, sysm.n_inputs, size=1))
                succ, is_out = sysm.post(cell, d.u_index)
                assert not is_out
                cell = int(rng.choice(succ))
                assert cell in dom


class TestBankSerialization:
    def test_round_trip_dense(self, automaton7, automaton7_bank, tmp_path):
        sysm, _, _ = automaton7
        path = tmp_path / "bank.pshb"
        save_bank(automaton7_bank, path)
        loaded = load_bank(path, sysm, spot_check=2)
        assert loaded.n_atomics == 2
        for i in range(2):
            assert controller_equal(loaded.table(i), automaton7_bank.table(i))
            assert loaded.safes[i] == automaton7_bank.safes[i]

    def test_round_trip_delta(self, rng, tmp_path):
        sysm = random_system(rng, max_states=40)
        base = random_state_set(rng, sysm.n_states, density=0.95)
        atomics = [base] + [base & random_state_set(rng, sysm.n_states) for _ in range(3)]
        bank = synthesize_bank(sysm, atomics, base_id=0)
        path = tmp_path / "bank.pshb"
        save_bank(bank, path)
        loaded = load_bank(path, sysm, spot_check=2)
        assert loaded.base_id == 0
        for i in range(4):
            assert controller_equal(loaded.table(i), bank.table(i))

    def test_wrong_abstraction_rejected(self, automaton7, automaton7_bank, tmp_path, rng):
        path = tmp_path / "bank.pshb"
        save_bank(automaton7_bank, path)
        other = random_system(rng)
        with pytest.raises(AbstractionMismatch):
            load_bank(path, other)

    def test_tampered_table_fails_spot_check(self, automaton7, automaton7_bank, tmp_path):
        sysm, _, _ = automaton7
        path = tmp_path / "bank.pshb"
        tampered = AtomicShieldBank(sysm, automaton7_bank.safes,
                                    [automaton7_bank.table(1), automaton7_bank.table(0)])
        save_bank(tampered, path)
        with pytest.raises(AbstractionMismatch):
            load_bank(path, sysm, spot_check=2)
