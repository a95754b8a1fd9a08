"""Acceptance gate: one test per criterion, each at its stated tolerance.

A summary line per criterion is printed at the end of the pytest run.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

import gradcheck
import oracles
from fedkd.distill import (
    DistillConfig,
    ScoreDistribution,
    TemperatureNet,
    adaptive_temperature,
    asymmetric_distribution,
    combined_loss,
    distill_step,
    soft_label_loss,
)
from fedkd.evaluate import evaluate_federation, rank_triple
from fedkd.experiment import compare_methods
from fedkd.federation import (
    RoundConfig,
    ServerState,
    aggregate,
    distribute,
    local_training,
    make_clients,
    train_until_stopped,
)
from fedkd.kg import FederatedDataset, partition_by_relation
from fedkd.scorers import MODEL_KINDS, InitParams, init_embeddings, score
from fedkd.synthetic import synthetic_graph
from toys import integer_table, random_graph, toy_federation

# -- 1 -----------------------------------------------------------------------


def test_criterion_1_gradients(record):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = {}
    for kind in MODEL_KINDS:
        worst[f"{kind}.score"] = max(gradcheck.check_score_gradient(kind, rng) for _ in range(100))
        worst[f"{kind}.loss"] = max(gradcheck.check_hard_loss_gradient(kind, rng, n=3) for _ in range(100))
    # 100 full distillation steps, cycling through the scorers
    worst["distill_step"] = max(gradcheck.check_distill_step(MODEL_KINDS[i % 3], rng) for i in range(100))
    elapsed = time.perf_counter() - start
    limits = {k: (gradcheck.SCORE_TOL[k.split(".")[0]] if k.endswith(".score") else 1e-4) for k in worst}
    record(1, "max rel err " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f"; {elapsed:.0f}s")
    for k, v in worst.items():
        assert v < limits[k], k
    assert elapsed < 60


# -- 2 -----------------------------------------------------------------------


def test_criterion_2_distribution_invariants(record):
    rng = np.random.default_rng(7)
    calls = worst_sum = worst_sym = 0.0
    tau_lo, tau_hi = np.inf, -np.inf
    for _ in range(100):
        kind = MODEL_KINDS[rng.integers(3)]
        table = init_embeddings(InitParams(rng.uniform(1, 12), 2.0, int(rng.integers(1, 9))), kind, 12, 3, rng)
        table.entity *= rng.uniform(0.5, 20)
        tau_min = rng.uniform(0.1, 2.0)
        tau_max = tau_min + rng.uniform(0.0, 10.0)
        net = TemperatureNet.init(rng, tau_min, tau_max)
        net.b1 = rng.normal(scale=2, size=32)
        net.b2 = np.asarray(rng.normal(scale=5))
        for _ in range(50):
            pos = (int(rng.integers(12)), int(rng.integers(3)), int(rng.integers(12)))
            negs = rng.integers(0, 12, int(rng.integers(1, 9)))
            tau_pos = float(adaptive_temperature(net, rng.uniform()))
            tau_lo, tau_hi = min(tau_lo, tau_pos - tau_min), max(tau_hi, tau_pos - tau_max)
            d = asymmetric_distribution(table, pos, negs, tau_pos, rng.uniform(0.1, 5.0))
            worst_sum = max(worst_sum, abs(d.probs.sum() - 1.0))
            tau = rng.uniform(0.1, 5.0)
            sym = asymmetric_distribution(table, pos, negs, tau, tau)
            ref = oracles.softmax(oracles.ref_candidate_scores(kind, table.gamma, table.bound, table.entity,
                                                               table.relation, pos, negs) / tau)
            worst_sym = max(worst_sym, float(np.max(np.abs(sym.probs - ref))))
            calls += 2
    record(2, f"{int(calls)} calls; max |sum-1|={worst_sum:.1e}; max |sym-softmax|={worst_sym:.1e}; "
              f"tau within range: {tau_lo >= 0 and tau_hi <= 0}")
    assert calls >= 10_000
    assert worst_sum <= 1e-9
    assert tau_lo >= 0 and tau_hi <= 0
    assert worst_sym <= 1e-12


# -- 3 -----------------------------------------------------------------------


def test_criterion_3_kl_properties(record):
    rng = np.random.default_rng(3)
    lowest = np.inf
    for _ in range(10_000):
        size = int(rng.integers(2, 12))
        scale = 10 ** rng.uniform(-3, 2)
        p = np.log(oracles.softmax(rng.normal(scale=scale, size=size)))
        q = p + rng.normal(scale=scale * rng.uniform(0, 1), size=size) * (rng.uniform() < 0.9)
        q = q - np.logaddexp.reduce(q)
        kl = soft_label_loss(ScoreDistribution(np.exp(p), p), ScoreDistribution(np.exp(q), q),
                             ("student_teacher", "teacher_student")[rng.integers(2)])
        lowest = min(lowest, kl)
    identical = 0.0
    for kind in MODEL_KINDS:
        for _ in range(5):
            t = init_embeddings(InitParams(8, 2, 4), kind, 6, 2, rng)
            net = TemperatureNet.init(rng, 1.0, 10.0)
            pos = np.column_stack([rng.integers(0, 6, 4), rng.integers(0, 2, 4), rng.integers(0, 6, 4)])
            res = distill_step(t, t, net, pos, rng.integers(0, 6, (4, 3)), DistillConfig())
            identical = max(identical, res.soft)
    record(3, f"min KL over 10000 pairs={lowest:.1e}; soft loss with teacher == student={identical:.1e}")
    assert lowest >= 0.0
    assert identical < 1e-12


# -- 4 -----------------------------------------------------------------------


def test_criterion_4_federation_oracle(record):
    rng = np.random.default_rng(4)
    fed = toy_federation()
    assert fed.num_global_entities <= 10
    params = InitParams(6.0, 2.0, 4)
    server = ServerState.create(fed, params, "RotatE", 1)
    worst = 0.0
    for _ in range(20):
        tables = [rng.normal(size=(len(m), server.entity.shape[1])) for m in fed.entity_maps]
        expected = oracles.brute_aggregate(server.entity, tables, fed.entity_maps)
        aggregate(server, tables, fed.entity_maps)
        worst = max(worst, float(np.max(np.abs(server.entity - expected))))

    one = FederatedDataset(fed.clients[:1], fed.entity_maps[:1], fed.global_entities)
    solo_server = ServerState.create(one, params, "RotatE", 2)
    (solo,) = make_clients(one, params, "RotatE", 2)
    distribute(solo_server, solo)
    before = solo_server.entity.tobytes()
    aggregate(solo_server, [solo.table.entity], one.entity_maps)
    identity = solo_server.entity.tobytes() == before

    # relation matrices pass through every server step untouched
    clients = make_clients(fed, params, "RotatE", 0, lr=0.01)
    cfg = RoundConfig(local_epochs=1, batch_size=4, n_negatives=3, lr=0.01)
    untouched = True
    for _ in range(3):
        rel = [c.table.relation.tobytes() for c in clients]
        for c in clients:
            distribute(server, c)
        untouched &= [c.table.relation.tobytes() for c in clients] == rel
        for c in clients:
            local_training(c, cfg, None)
        rel = [c.table.relation.tobytes() for c in clients]
        aggregate(server, [c.table.entity for c in clients], [c.entity_map for c in clients])
        untouched &= [c.table.relation.tobytes() for c in clients] == rel
    server_fields = set(vars(server))
    record(4, f"max |aggregate - oracle|={worst:.1e}; single-client identity={identity}; "
              f"relations untouched by server steps={untouched}; server fields={sorted(server_fields)}")
    assert worst <= 1e-12
    assert identity and untouched
    assert server_fields == {"entity", "mask"}


# -- 5 -----------------------------------------------------------------------


def _five_rounds(mode, kind, lam=0.0):
    fed = toy_federation()
    params = InitParams(6.0, 2.0, 4)
    teachers = dcfg = None
    if mode == "distill":
        teachers = [init_embeddings(InitParams(8.0, 2.0, 8), kind, kg.num_entities, kg.num_relations,
                                    np.random.default_rng(50 + i)) for i, kg in enumerate(fed.clients)]
        dcfg = DistillConfig(lam=lam)
    clients = make_clients(fed, params, kind, 11, teachers, dcfg, lr=0.01)
    server = ServerState.create(fed, params, kind, 12)
    cfg = RoundConfig(local_epochs=2, batch_size=4, n_negatives=3, lr=0.01, eval_every=1, patience=10,
                      max_rounds=5, mode=mode)
    res = train_until_stopped(server, clients, cfg, dcfg)
    test = evaluate_federation([c.table for c in res.best], [c.graph for c in res.best], "test")
    history = [{k: v for k, v in h.items() if k != "wall_clock"} for h in res.history]
    return history, test.to_dict(), [c.table.entity.tobytes() + c.table.relation.tobytes() for c in clients]


def test_criterion_5_mode_collapse(record):
    same = {}
    for kind in MODEL_KINDS:
        a, b = _five_rounds("fedE", kind), _five_rounds("distill", kind, lam=0.0)
        assert len(a[0]) == 5
        same[kind] = a == b
    record(5, "lambda=0 distill == fedE over 5 rounds (losses, metrics, tables): "
              + ", ".join(f"{k}={v}" for k, v in same.items()))
    assert all(same.values())


# -- 6 -----------------------------------------------------------------------


def _monotone(report):
    return all(m.hits1 <= m.hits5 <= m.hits10 and m.mrr >= m.hits1 for m in [report, *report.per_client])


def test_criterion_6_ranking_oracle(record):
    rng = np.random.default_rng(6)
    checked = mismatches = ties = 0
    reports_ok = True
    for trial in range(60):
        kind = MODEL_KINDS[trial % 3]
        g = random_graph(rng, num_entities=int(rng.integers(6, 21)))
        t = integer_table(kind, rng, g) if trial % 2 else init_embeddings(
            InitParams(6, 2, 3), kind, g.num_entities, g.num_relations, rng)
        known = set(map(tuple, g.all_triples().tolist()))
        fn = lambda h, r, e: score(t, h, r, e)
        for triple in g.test.tolist():
            for direction in ("tail", "head"):
                for index, kn in ((g.filter_index(), known), (None, set())):
                    got = rank_triple(t, triple, direction, index)
                    want = oracles.brute_rank(fn, g.num_entities, triple, direction, kn)
                    mismatches += got != want
                    ties += got != int(got)
                    checked += 1
        for filtered in (True, False):
            reports_ok &= _monotone(evaluate_federation([t], [g], "test", filtered))
    record(6, f"{checked} ranks vs exhaustive oracle: {mismatches} mismatches, {ties} with ties; "
              f"metric monotonicity on every report={reports_ok}")
    assert mismatches == 0 and ties > 0 and reports_ok


# -- 7 and 9 -----------------------------------------------------------------

DESK_KINDS = ("TransE", "ComplEx")
DESK_SEEDS = range(5)
DESK_ROUNDS = RoundConfig(local_epochs=3, batch_size=256, eval_every=5, patience=3, max_rounds=100,
                          n_negatives=32, lr=0.01)
DESK_DISTILL = DistillConfig(lam=3.0, tau=1.0, tau_min=1.0, tau_max=10.0)


@pytest.fixture(scope="module")
def desk():
    """Per (kind, seed) method runs on the synthetic FKG, timed."""
    start = time.perf_counter()
    runs = {}
    for kind in DESK_KINDS:
        for seed in DESK_SEEDS:
            fed = partition_by_relation(synthetic_graph(seed=seed), 3, seed)
            runs[kind, seed] = compare_methods(fed, kind, InitParams(8.0, 2.0, 64), InitParams(6.0, 2.0, 16),
                                               DESK_ROUNDS, seed, DESK_DISTILL, ablation=seed == 0)
    return runs, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_7_desk_experiment(record, desk):
    runs, elapsed = desk
    lines, ordering, recovered = [], {}, {}
    for kind in DESK_KINDS:
        mrr = {m: float(np.mean([runs[kind, s][m].test.mrr for s in DESK_SEEDS]))
               for m in ("FedEH", "FedEL", "FedEKD")}
        ordering[kind] = mrr["FedEKD"] >= mrr["FedEL"]
        recovered[kind] = mrr["FedEKD"] / mrr["FedEH"]
        lines.append(f"{kind}: EH {mrr['FedEH']:.4f} EL {mrr['FedEL']:.4f} EKD {mrr['FedEKD']:.4f} "
                     f"(recovery {recovered[kind]:.1%})")
    record(7, "; ".join(lines) + f"; {len(DESK_SEEDS)} seeds in {elapsed:.0f}s")
    assert all(ordering.values())
    assert max(recovered.values()) >= 0.95
    assert elapsed < 15 * 60


# -- 8 -----------------------------------------------------------------------


def test_criterion_8_dynamic_weight(record):
    rng = np.random.default_rng(8)
    violations = 0
    for _ in range(1000):
        length = int(rng.integers(2, 30))
        sums = np.sort(rng.uniform(1e-3, 50.0, length))[::-1]
        sums = sums[np.concatenate([[True], np.diff(sums) < 0])]
        frac = rng.uniform(0, 1, len(sums))
        lam = rng.uniform(0.1, 10.0)
        coefs = [combined_loss(s * f, s * (1 - f), lam)[1] for s, f in zip(sums, frac)]
        violations += not all(a < b for a, b in zip(coefs, coefs[1:]))
    record(8, f"1000 decreasing sequences, {violations} with a non-increasing coefficient")
    assert violations == 0


# -- 9 -----------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_9_ablation_hook(record, desk):
    runs, _ = desk
    kind = DESK_KINDS[0]
    on, off = runs[kind, 0]["FedEKD"], runs[kind, 0]["FedEKD*"]
    assert replace(DESK_DISTILL, aats=False).aats is False
    record(9, f"{kind} seed 0: FedEKD MRR {on.test.mrr:.4f}, FedEKD* (aats off) MRR {off.test.mrr:.4f}")
    for run in (on, off):
        rep = run.test
        assert _monotone(rep) and 0 < rep.mrr <= 1 and len(rep.per_client) == 3
        assert all(np.isfinite(list(rep.summary().values())))
    assert on.result.best[0].net is not None
