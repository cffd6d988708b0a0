import numpy as np
import pytest
from pydantic import ValidationError

from rbayes.errors import DomainError, EnumerationCapError
from rbayes.protocols import RB, Dihedral, leakage_seepage
from rbayes.qsim import (
    Channel,
    NoiseModel,
    Propagator,
    SpamConfig,
    average_gate_fidelity,
    average_survival,
    build_noise,
    clifford_subgroup,
    dephasing,
    depolarizing,
    dihedral_group,
    dle,
    enumerate_survival_distribution,
    overrotation,
    pathological_reset_state,
    rb_parameters,
    reset_mixture,
    simulate_dataset,
    unitary_channel,
)
from rbayes.structs import NoiseKind, NoiseOrder, NoiseSpec


def non_diagonal_gate():
    return next(g for g in clifford_subgroup().gates if not g.is_z_rotation())


CHANNELS = {
    "depolarizing": lambda: depolarizing(0.3),
    "depolarizing-qutrit": lambda: depolarizing(0.2, d=3),
    "dephasing": lambda: dephasing(0.4),
    "unitary": lambda: unitary_channel(non_diagonal_gate()),
    "overrotation": lambda: overrotation(non_diagonal_gate(), 0.11132),
    "reset-mixture": lambda: reset_mixture(0.3, 0.1, pathological_reset_state()),
    "dle": lambda: dle(dephasing(0.01), L1=0.002, L2=0.003),
}


def random_density(rng, d):
    g = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
    rho = g @ g.conj().T
    return rho / np.trace(rho)


@pytest.mark.unit
class TestGroups:
    def test_group_orders(self):
        assert clifford_subgroup().size == 12
        assert dihedral_group(4).size == 8

    def test_inverse_and_completion(self, rng):
        gs = clifford_subgroup()
        for a in range(gs.size):
            assert gs.table[a, gs.inverse[a]] == gs.identity
        seq = [int(g) for g in rng.integers(gs.size, size=7)]
        seq.append(gs.completion(seq))
        assert gs.compose(seq) == gs.identity

    @pytest.mark.parametrize("group", [clifford_subgroup, lambda: dihedral_group(4)])
    def test_closed_up_to_global_phase(self, group):
        gs = group()
        d = gs.dim
        for a in range(gs.size):
            for b in range(gs.size):
                product = gs.gates[a].matrix @ gs.gates[b].matrix
                member = gs.gates[gs.table[a, b]].matrix
                assert abs(np.trace(member.conj().T @ product)) == pytest.approx(d, abs=1e-10)


@pytest.mark.unit
class TestChannels:
    @pytest.mark.parametrize("s", [0.0, 0.1, 0.5, 1.0])
    def test_depolarizing_fidelity(self, s):
        assert average_gate_fidelity(depolarizing(s)) == pytest.approx(1 - s / 2)

    @pytest.mark.parametrize("name", list(CHANNELS))
    def test_every_constructor_is_cptp(self, name, rng):
        channel = CHANNELS[name]()
        assert channel.min_choi_eigenvalue() >= -1e-10
        for _ in range(100):
            out = channel.apply(random_density(rng, channel.dim))
            assert abs(np.trace(out) - 1) < 1e-10
            assert np.min(np.linalg.eigvalsh((out + out.conj().T) / 2)) >= -1e-10

    @pytest.mark.parametrize("order", list(NoiseOrder))
    def test_noise_order(self, order):
        # full reset to |0><0| makes the two orders distinguishable
        reset = reset_mixture(1.0, 0.0, [1, 0])
        gs = clifford_subgroup()
        r = next(k for k, g in enumerate(gs.gates) if not g.is_z_rotation())
        step = Channel(superop=Propagator(gs, NoiseModel.gate_independent(reset, order)).at(0)[r])
        out = step.apply(np.diag([0.0, 1.0]))
        zero = np.array([1, 0], dtype=np.complex128)
        if order == NoiseOrder.PRE:
            g = gs.gates[r].matrix @ zero
            np.testing.assert_allclose(out, np.outer(g, g.conj()), atol=1e-12)
        else:
            np.testing.assert_allclose(out, np.outer(zero, zero), atol=1e-12)

    def test_rejects_non_trace_preserving(self):
        with pytest.raises(ValidationError):
            Channel(superop=2 * np.eye(4))

    def test_rejects_out_of_range_strength(self):
        with pytest.raises(DomainError):
            dephasing(1.5)

    def test_dle_leakage_and_seepage(self):
        channel = dle(dephasing(0.01), L1=0.002, L2=0.003)
        L1, L2 = leakage_seepage(channel, 2, 1)
        assert L1 == pytest.approx(0.002, abs=1e-12)
        assert L2 == pytest.approx(0.003, abs=1e-12)

    def test_build_noise_matches_gate_set(self):
        gs = clifford_subgroup()
        noise = build_noise(NoiseSpec.parse("dephased-overrotation:0.01,0.05"), gs)
        assert all(noise.channel(r).dim == 2 for r in range(gs.size))
        with pytest.raises(ValueError):
            NoiseSpec.parse("depolarizing:0.1,0.2")


@pytest.mark.unit
class TestSurvival:
    def test_depolarizing_average_matches_decay(self):
        rb = RB()
        channel = depolarizing(0.03)
        noise = NoiseModel.gate_independent(channel)
        spam = rb.default_spam(0.97)["0"]
        p, A, B = rb_parameters(channel, spam)
        assert p == pytest.approx(0.97)
        for M in (1, 3, 10, 40):
            expected = (A - B) * p**M + B
            assert average_survival(rb, noise, spam, M, "0") == pytest.approx(expected, abs=1e-12)

    def test_enumeration_agrees_with_average(self):
        rb = RB()
        noise = build_noise(NoiseSpec(kind=NoiseKind.OVERROTATION, params=[0.05]), rb.gateset)
        spam = SpamConfig.standard()
        dist = enumerate_survival_distribution(rb, noise, spam, 2, "0")
        assert dist.size > 1
        assert dist.mean == pytest.approx(average_survival(rb, noise, spam, 2, "0"), abs=1e-12)

    def test_enumeration_cap(self):
        rb = RB()
        noise = NoiseModel.gate_independent(depolarizing(0.01))
        with pytest.raises(EnumerationCapError):
            enumerate_survival_distribution(rb, noise, SpamConfig.standard(), 6, "0", cap=1000)

    def test_dihedral_sequences_end_on_stabilizer(self, rng):
        proto = Dihedral()
        gs = proto.gateset
        allowed = set(proto.template(3, "X").terminal or [])
        for _ in range(20):
            assert gs.compose(proto.sample_sequence(3, "X", rng)) in allowed


@pytest.mark.unit
class TestSimulateDataset:
    def test_record_count_and_order(self, rb):
        noise = NoiseModel.gate_independent(depolarizing(0.0002))
        records = simulate_dataset(rb, noise, rb.default_spam(0.99), [1, 10], I=5, N=30, seed=1)
        assert len(records) == 10
        assert [r.M for r in records] == [1] * 5 + [10] * 5
        assert all(r.N == 30 and 0 <= r.Q <= 30 for r in records)

    def test_noiseless_single_shot_always_survives(self, rb):
        noise = NoiseModel.gate_independent(Channel.identity())
        records = simulate_dataset(rb, noise, rb.default_spam(1.0), [1, 50], I=10, N=1, seed=4)
        assert all(r.Q == 1 for r in records)

    def test_seed_reproducible_across_worker_counts(self, rb):
        noise = NoiseModel.gate_independent(depolarizing(0.05))
        spam = rb.default_spam(0.99)
        one = simulate_dataset(rb, noise, spam, [1, 5, 9], I=4, N=20, seed=7, workers=1)
        many = simulate_dataset(rb, noise, spam, [1, 5, 9], I=4, N=20, seed=7, workers=3)
        other = simulate_dataset(rb, noise, spam, [1, 5, 9], I=4, N=20, seed=8, workers=1)
        assert one == many
        assert one != other

    def test_nv_records(self, rb):
        noise = NoiseModel.gate_independent(depolarizing(0.01))
        records = simulate_dataset(
            rb, noise, rb.default_spam(), [1, 5], I=3, N=1, seed=2, nv_rates=(5.0, 20.0)
        )
        assert all(r.is_nv and r.N is None for r in records)

    def test_shuffle_keeps_records(self, rb):
        noise = NoiseModel.gate_independent(depolarizing(0.01))
        spam = rb.default_spam()
        plain = simulate_dataset(rb, noise, spam, [1, 5, 9], I=4, N=10, seed=5)
        mixed = simulate_dataset(rb, noise, spam, [1, 5, 9], I=4, N=10, seed=5, shuffle=True)
        key = lambda r: (r.M, r.i)  # noqa: E731
        assert sorted(plain, key=key) == sorted(mixed, key=key)

    def test_invalid_sizes(self, rb):
        noise = NoiseModel.gate_independent(depolarizing(0.01))
        with pytest.raises(DomainError):
            simulate_dataset(rb, noise, rb.default_spam(), [1], I=0, N=10, seed=0)
