import copy

import numpy as np
import pytest

from fedamole.backbone import checksum
from fedamole.config import ExperimentConfig
from fedamole.data import ClientData, Example, generate_corpus
from fedamole.errors import FeasibilityError, ProtocolError
from fedamole.evalkit import mtal
from fedamole.fedsim import (
    AssignmentSettings,
    ClientState,
    Federation,
    aggregate,
    audit_plan,
    build_modules,
    compute_client_embeddings,
    initial_assignment,
    local_finetune,
    make_package,
    run_round,
    run_training,
)
from fedamole.privacy import DPConfig


def tiny(**sections):
    base = ExperimentConfig().replace(
        data={"seqs_per_domain": 30, "embedding_set_size": 4},
        federation={"rounds": 2, "local_steps": 3},
    )
    return base.replace(**sections)


def parameters_snapshot(fed):
    out = {}
    for key, gm in fed.server.modules.items():
        for j, e in gm.experts.items():
            out[key, j] = (e["A"].copy(), e["B"].copy())
        if gm.shared is not None:
            out[key, "s"] = (gm.shared["A"].copy(), gm.shared["B"].copy())
        if gm.projection is not None:
            out[key, "t"] = (gm.projection.copy(),)
    return out


class TestInitialAssignment:
    def test_one_each(self):
        plan = initial_assignment(AssignmentSettings(2, 2, 1, 1, 2), ["m"])
        assert plan == {"m": {0: [0], 1: [1]}}

    def test_two_each(self):
        plan = initial_assignment(AssignmentSettings(2, 4, 2, 1, 2), ["m"])
        assert [len(v) for v in plan["m"].values()] == [2, 2]

    @pytest.mark.parametrize("C,E,k_e,k_c,b", [(4, 6, 2, 2, 4), (3, 7, 1, 2, 5), (5, 3, 1, 2, 2), (4, 13, 2, 1, 4)])
    def test_satisfies_constraints(self, C, E, k_e, k_c, b):
        s = AssignmentSettings(C, E, k_e, k_c, b)
        assert audit_plan(initial_assignment(s, ["a", "b"]), s) == []

    def test_infeasible(self):
        with pytest.raises(FeasibilityError):
            initial_assignment(AssignmentSettings(3, 2, 2, 2, 2), ["m"])


@pytest.fixture(scope="module")
def fed():
    return Federation(tiny(), "fedamole", seed=3)


class TestLocalFinetune:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_loss_decreases(self, seed):
        f = Federation(tiny(), "fedamole", seed=seed)
        client = f.clients[0]
        client.data.train = client.data.train[:20]
        client.modules = build_modules(f.server, f.backbone, 0, f.cfg, f.mode)
        losses = local_finetune(client, f.backbone, 50, 5e-3, 1e-3, np.random.default_rng(seed))
        assert len(losses) == 50
        assert np.mean(losses[-10:]) < np.mean(losses[:10])

    def test_zero_steps(self, fed):
        client = fed.clients[1]
        client.modules = build_modules(fed.server, fed.backbone, 1, fed.cfg, fed.mode)
        before = [p.data.copy() for s in client.modules.values() for p in s.parameters()]
        assert local_finetune(client, fed.backbone, 0, 1e-2, 0.0, np.random.default_rng(0)) == []
        after = [p.data for s in client.modules.values() for p in s.parameters()]
        assert all(np.array_equal(a, b) for a, b in zip(before, after))

    def test_backbone_frozen(self, fed):
        before = checksum(fed.backbone)
        client = fed.clients[0]
        client.modules = build_modules(fed.server, fed.backbone, 0, fed.cfg, fed.mode)
        local_finetune(client, fed.backbone, 5, 1e-2, 1e-3, np.random.default_rng(0))
        assert checksum(fed.backbone) == before

    def test_empty_training_set(self, fed):
        client = ClientState(9, ClientData([], [], []))
        with pytest.raises(ValueError):
            local_finetune(client, fed.backbone, 1, 1e-2, 0.0, np.random.default_rng(0))


class TestEmbeddings:
    def _client(self, fed, embedding):
        client = ClientState(0, ClientData(fed.clients[0].data.train, [], [], embedding))
        client.modules = build_modules(fed.server, fed.backbone, 0, fed.cfg, fed.mode)
        return client

    def test_single_token(self, fed):
        from fedamole.backbone import forward

        client = self._client(fed, [Example((9,), (), 0)])
        emb = compute_client_embeddings(client, fed.backbone)
        hidden = forward(fed.backbone, [9]).hidden
        for point, state in client.modules.items():
            h = hidden[point].data[0]
            np.testing.assert_allclose(emb[str(point)].token, state.projection.W.data @ h, atol=1e-12)
            for e in state.experts:
                np.testing.assert_allclose(emb[str(point)].experts[e.expert_id], e.A.data @ h, atol=1e-12)

    def test_duplication_invariance(self, fed):
        examples = fed.clients[0].data.train[:3]
        once = compute_client_embeddings(self._client(fed, examples), fed.backbone)
        twice = compute_client_embeddings(self._client(fed, examples * 2), fed.backbone)
        for key in once:
            np.testing.assert_allclose(once[key].token, twice[key].token, atol=1e-12)

    def test_identical_clients_identical_embeddings(self, fed):
        examples = fed.clients[0].data.train[:3]
        a = compute_client_embeddings(self._client(fed, examples), fed.backbone)
        b = compute_client_embeddings(self._client(fed, examples), fed.backbone)
        for key in a:
            assert a[key].token.tobytes() == b[key].token.tobytes()

    def test_empty(self, fed):
        with pytest.raises(ValueError):
            compute_client_embeddings(self._client(fed, []), fed.backbone)


class TestAggregate:
    def _packages(self, fed):
        packages = []
        for client in fed.clients:
            client.modules = build_modules(fed.server, fed.backbone, client.client_id, fed.cfg, fed.mode)
            packages.append(make_package(client, None, DPConfig(), np.random.default_rng(0)))
        return packages

    def test_fixed_point(self):
        f = Federation(tiny(), "fedamole", seed=5)
        rng = np.random.default_rng(0)
        for gm in f.server.modules.values():
            for e in gm.experts.values():
                e["B"] = rng.normal(size=e["B"].shape)
        before = parameters_snapshot(f)
        aggregate(f.server, self._packages(f))
        after = parameters_snapshot(f)
        for key in before:
            for x, y in zip(before[key], after[key]):
                np.testing.assert_allclose(y, x, atol=1e-12, rtol=0)

    def test_two_point_mean(self):
        f = Federation(tiny(), "fedamole", seed=5)
        packages = self._packages(f)
        key = next(iter(f.server.plan))
        owners = [c for c, ids in f.server.plan[key].items() if 0 in ids]
        assert len(owners) == 2
        packages[owners[0]].modules[key].experts[0]["A"][...] = 0.0
        packages[owners[1]].modules[key].experts[0]["A"][...] = 2.0
        aggregate(f.server, packages)
        np.testing.assert_array_equal(f.server.modules[key].experts[0]["A"], 1.0)

    def test_singleton_mean(self):
        cfg = tiny(hmole={"k_c": 1, "e_total": 8, "k_e": 2, "b": 2})
        f = Federation(cfg, "fedamole", seed=5)
        packages = self._packages(f)
        key = next(iter(f.server.plan))
        owner = next(c for c, ids in f.server.plan[key].items() if 3 in ids)
        packages[owner].modules[key].experts[3]["B"][...] = 7.5
        aggregate(f.server, packages)
        np.testing.assert_array_equal(f.server.modules[key].experts[3]["B"], 7.5)

    def test_shared_averaged_over_all(self):
        f = Federation(tiny(), "fedamole", seed=5)
        packages = self._packages(f)
        key = next(iter(f.server.plan))
        for i, p in enumerate(packages):
            p.modules[key].shared["A"][...] = float(i)
        aggregate(f.server, packages)
        np.testing.assert_array_equal(f.server.modules[key].shared["A"], 1.5)

    def test_missing_package(self):
        f = Federation(tiny(), "fedamole", seed=5)
        with pytest.raises(ProtocolError, match="missing"):
            aggregate(f.server, self._packages(f)[:-1])

    def test_unassigned_expert_rejected(self):
        f = Federation(tiny(), "fedamole", seed=5)
        packages = self._packages(f)
        key = next(iter(f.server.plan))
        extra = next(j for j in range(6) if j not in f.server.plan[key][0])
        packages[0].modules[key].experts[extra] = copy.deepcopy(f.server.modules[key].experts[extra])
        with pytest.raises(ProtocolError):
            aggregate(f.server, packages)


class TestRounds:
    def test_symmetric_clients(self):
        cfg = tiny(federation={"n_clients": 2, "rounds": 1, "local_steps": 2}, hmole={"e_total": 2, "k_e": 1, "k_c": 2, "b": 2})
        corpus = generate_corpus(cfg.data.corpus(64))
        data = [ClientData(corpus[:20], corpus[20:24], corpus[24:30]) for _ in range(2)]
        f = Federation(cfg, "fedamole", seed=0, clients_data=[copy.deepcopy(d) for d in data])
        f.client_rng = lambda client_id, round_index, purpose: np.random.default_rng([0, round_index, purpose])
        record = f.run_round()
        assert record.acc[0] == record.acc[1]
        assert record.extras["loss"][0] == record.extras["loss"][1]

    def test_fedit_plan_is_degenerate(self):
        events = []
        f = Federation(tiny(), "fedit", seed=0, emit=events.append)
        f.run()
        assert f.server.plan == {k: {c: [0] for c in range(4)} for k in f.server.plan}
        assert not any(e["event"] == "rsea" for e in events)

    @pytest.mark.parametrize("mode", ["fedamole", "ablate-h", "ablate-s", "random"])
    def test_constraints_and_conservation(self, mode):
        cfg = tiny(federation={"rounds": 3})
        f = Federation(cfg, mode, seed=1)
        for _ in range(3):
            f.run_round()
            assert audit_plan(f.server.plan, f.settings) == []
            for module in f.server.plan.values():
                assert sum(len(v) for v in module.values()) == cfg.hmole.e_total * cfg.hmole.k_c

    def test_ablate_r_keeps_initial_plan(self):
        f = Federation(tiny(federation={"rounds": 3}), "ablate-r", seed=1)
        first = copy.deepcopy(f.server.plan)
        f.run()
        assert f.server.plan == first

    def test_ablate_s_uploads_no_shared_expert(self):
        f = Federation(tiny(), "ablate-s", seed=1)
        package = f.client_update(f.clients[0], 1)
        assert all(m.shared is None for m in package.modules.values())
        assert all(gm.shared is None for gm in f.server.modules.values())

    def test_ablate_h_uses_vanilla_router(self):
        f = Federation(tiny(), "ablate-h", seed=1)
        package = f.client_update(f.clients[0], 1)
        for m in package.modules.values():
            assert m.projection is None and m.router.shape == (6, 32)
            assert m.token_embedding.shape == (32,)

    def test_fedit_ft_runs_final_finetune(self):
        a = run_training(tiny(), "fedit", seed=2)
        b = run_training(tiny(), "fedit_ft", seed=2)
        assert a[0].acc == b[0].acc
        assert len(b) == 2

    def test_dp_embeddings_are_clipped(self):
        cfg = tiny(privacy={"enabled": True, "eta": 5.0, "clip": 0.5})
        f = Federation(cfg, "fedamole", seed=1)
        package = f.client_update(f.clients[0], 1)
        for m in package.modules.values():
            assert np.linalg.norm(m.token_embedding) <= 0.5
            assert all(np.linalg.norm(v) <= 0.5 for v in m.expert_embeddings.values())
        f.run()

    def test_personal_model_uses_own_experts(self, fed):
        for client in fed.clients:
            modules = build_modules(fed.server, fed.backbone, client.client_id, fed.cfg, fed.mode)
            for point, state in modules.items():
                assert state.expert_ids == fed.server.plan[str(point)][client.client_id]

    def test_broken_plan_rejected(self):
        f = Federation(tiny(), "fedamole", seed=1)
        key = next(iter(f.server.plan))
        f.server.plan[key][0] = []
        with pytest.raises(ProtocolError):
            f.run_round()


class TestTraining:
    def test_single_round_equals_run_round(self):
        cfg = tiny(federation={"rounds": 1})
        log = run_training(cfg, seed=4)
        record = run_round(Federation(cfg, seed=4))
        assert log[0].acc == record.acc and log[0].extras == record.extras

    def test_deterministic(self):
        a = run_training(tiny(), seed=9)
        b = run_training(tiny(), seed=9)
        assert [(r.acc, r.extras) for r in a.records] == [(r.acc, r.extras) for r in b.records]
        assert mtal(a) == mtal(b)

    def test_infeasible_config_fails_before_training(self):
        with pytest.raises(FeasibilityError):
            Federation(tiny(hmole={"k_e": 3, "b": 2}), seed=0)

    def test_lr_decays(self, fed):
        assert fed.round_lr(1) == fed.cfg.federation.lr
        assert fed.round_lr(3) == pytest.approx(fed.cfg.federation.lr * 0.99**2)
