"""Acceptance suite: one test per release criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion lines.
The browser UI interaction criterion lives in the frontend package tests.
"""
import json
import math
import threading
import time
import urllib.request

import numpy as np
import pytest

from cystqa.baseline import fit_baseline, predict_baseline
from cystqa.cli import main as cli_main
from cystqa.dataset import SynthConfig, generate_synthetic_stack, save_mask_png, save_stack
from cystqa.harness import ExperimentConfig, fit_model, predict_proposals, prepare, run_rcap_eval
from cystqa.metrics import confusion, iou, variance_over_mean
from cystqa.paresn import (
    EsnHyperParams,
    SubWindow,
    check_stopping,
    finalize,
    init_paresn,
    train_on_window,
    train_paresn,
)
from cystqa.preprocess import PreprocessedPlanes, bottom_hat
from cystqa.rcap import RcapConfig, apply_crop_paste, rcap
from cystqa.review import QueueStore, build_queue, make_server
from cystqa.tlsa import TAU_G1, TAU_G2, TAU_MANUAL, tlsa
from test_tlsa import _blob, _flat_img, _rps


def _report(name: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"ACCEPTANCE {name}: {status}{suffix}")
    assert ok, f"{name}: {detail}"


@pytest.fixture(scope="module")
def synthetic_env(tmp_path_factory):
    """Zero-bias 40-image stack with a trained ParESN model and its proposals."""
    stack_dir = tmp_path_factory.mktemp("accept_stack")
    records, gt = generate_synthetic_stack(SynthConfig(num_images=40, rng_seed=11))
    save_stack(records, stack_dir, gt=gt)
    cfg = ExperimentConfig(
        stack_dir=str(stack_dir),
        out_dir=str(stack_dir / "out"),
        model="paresn",
        train_label="G1",
        rng_seed=5,
        repetitions=20,
        figures=False,
    )
    started = time.monotonic()
    prepared = prepare(cfg)
    model, _ = fit_model(cfg, prepared)
    test_ids = sorted(prepared.split.test_ids)
    proposals = {i: predict_proposals(cfg, model, prepared, i) for i in test_ids}
    return {
        "cfg": cfg,
        "prepared": prepared,
        "model": model,
        "proposals": proposals,
        "test_ids": test_ids,
        "setup_seconds": time.monotonic() - started,
    }


class TestRidgeReadout:
    def test_oracle_equivalence_100_instances(self):
        started = time.monotonic()
        worst = 0.0
        for i in range(100):
            rng = np.random.default_rng(1000 + i)
            n = int(rng.integers(1, 4))
            m = int(rng.integers(n + 1, 11))
            w_m = int(rng.integers(2, 15))  # up to 196 pixels
            # vary the ridge weight too; a single first-window state matrix is
            # nearly collinear, so tiny lambdas push the system's conditioning
            # to the very tolerance being verified
            lam = float(10.0 ** rng.uniform(-3, -1))
            hp = EsnHyperParams(m=m, n=n, c=2, w_m=w_m, branches=2, rng_seed=i, ridge_lambda=lam)
            model = init_paresn(hp)
            win = SubWindow(
                origin=(0, 0),
                height=w_m,
                width=w_m,
                planes=rng.random((n, w_m, w_m)),
                target=rng.random((w_m, w_m)) < 0.5,
            )
            train_on_window(model, win)
            dim = 1 + n + m
            expected = [
                np.linalg.inv(b.acc_a + hp.ridge_lambda * np.eye(dim)) @ b.acc_b
                for b in model.branches
            ]
            finalize(model)
            for branch, exp in zip(model.branches, expected):
                worst = max(worst, float(np.abs(branch.w_out - exp.T).max()))
        elapsed = time.monotonic() - started
        _report(
            "ridge-readout-oracle-equivalence",
            worst < 1e-8 and elapsed < 5.0,
            f"max abs err {worst:.2e}, {elapsed:.2f} s",
        )


class TestStateUpdateAlgebra:
    def test_leak_rate_algebra_50_seeds(self):
        def fresh_hp(seed):
            return EsnHyperParams(m=12, n=4, c=2, w_m=6, branches=2, rng_seed=seed)

        ok = True
        for seed in range(50):
            rng = np.random.default_rng(seed)
            win = SubWindow(
                origin=(0, 0),
                height=6,
                width=6,
                planes=rng.random((4, 6, 6)),
                target=rng.random((6, 6)) < 0.5,
            )
            frozen = init_paresn(fresh_hp(seed))
            frozen.hp.alpha = 0.0  # probe the raw update rule past config validation
            train_on_window(frozen, win)
            ok &= all(np.array_equal(b.state, np.zeros_like(b.state)) for b in frozen.branches)

            pure = init_paresn(fresh_hp(seed))
            pure.hp.alpha = 1.0
            train_on_window(pure, win)
            d = 36
            u = win.planes.reshape(4, d)
            stacked = np.vstack([np.ones((1, d)), u])
            ok &= all(
                np.allclose(b.state, np.tanh(b.w_in @ stacked), atol=1e-12)
                for b in pure.branches
            )

            default = init_paresn(fresh_hp(seed))
            train_on_window(default, win)
            ok &= all(np.abs(b.state).max() < 1.0 for b in default.branches)
            if not ok:
                break
        _report("state-update-algebra", ok, "alpha=0 frozen, alpha=1 pure tanh, states in (-1,1)")


class TestSpectralRadius:
    def test_power_iteration_oracle_20_seeds(self):
        def oracle(w, iters=100, tol=1e-8):
            v = np.ones(w.shape[0]) / np.sqrt(w.shape[0])
            prev = 0.0
            for _ in range(iters):
                u = w.dot(v)
                est = float(np.sqrt((u * u).sum()))
                if est == 0.0:
                    return 0.0
                v = u / est
                if abs(est - prev) < tol:
                    return est
                prev = est
            return prev

        worst = 0.0
        for seed in range(20):
            model = init_paresn(EsnHyperParams(m=100, rng_seed=seed))
            for branch in model.branches:
                worst = max(worst, abs(oracle(branch.w) - 0.9))
        _report("spectral-radius-scaling", worst <= 1e-6, f"max deviation {worst:.2e}")


class TestMetricIdentities:
    def test_identities_on_random_masks(self):
        rng = np.random.default_rng(77)
        roi = np.ones((16, 16), dtype=bool)
        worst = 0.0
        symmetric = True
        for _ in range(1000):
            a = rng.random((16, 16)) < rng.uniform(0.05, 0.6)
            b = rng.random((16, 16)) < rng.uniform(0.05, 0.6)
            conf = confusion(a, b, roi)
            worst = max(worst, abs(conf.dc - 2 * conf.iou / (1 + conf.iou)))
            symmetric &= iou(a, b) == iou(b, a)

        iff_holds = True
        for seed in range(300):
            rng_t = np.random.default_rng(seed)
            ps = [rng_t.random((12, 12)) < 0.35 for _ in range(3)]
            pair = np.array([iou(ps[0], ps[1]), iou(ps[0], ps[2]), iou(ps[1], ps[2])])
            phi_pi = variance_over_mean(pair)
            if pair.mean() > 0:
                iff_holds &= (phi_pi == 0.0) == bool(np.all(pair == pair[0]))
        # identical proposals: equal overlaps, zero dispersion
        m = np.zeros((8, 8), dtype=bool)
        m[2:5, 2:5] = True
        iff_holds &= variance_over_mean(np.array([1.0, 1.0, 1.0])) == 0.0
        # fully disjoint proposals: zero mean maps to the +inf sentinel
        iff_holds &= variance_over_mean(np.array([0.0, 0.0, 0.0])) == math.inf

        _report(
            "metric-identities",
            worst < 1e-12 and symmetric and iff_holds,
            f"dc-iou identity max err {worst:.2e} over 1000 pairs",
        )


class TestAlgorithmBranchCoverage:
    def test_all_branches_hand_traced(self):
        blank = np.zeros((40, 40), dtype=bool)
        t_a = _blob(0, 0)
        t_b = _blob(0, 20)
        union = t_a | t_b
        varied = _flat_img(0.5)
        varied[:, 20:] = np.tile(np.array([0.2, 0.8] * 10), (40, 1))
        varied_left = _flat_img(0.5)
        varied_left[:, :20] = np.tile(np.array([0.2, 0.8] * 10), (40, 1))
        t_shrunk = _blob(10, 10)
        t_shift = _blob(10, 10).copy()
        t_shift[10, 10:15] = False
        t_shift[26, 10:15] = True

        cases = [
            ("pre-check", _rps(t_a, t_b, _blob(22, 0, 10)), blank, blank, _flat_img(), TAU_MANUAL, "precheck_blank_manual"),
            ("line-7", _rps(_blob(0, 0, 6), _blob(20, 20, 6), _blob(30, 30, 6)), t_a, t_a.copy(), _flat_img(), TAU_MANUAL, "small_diff_rp_disagree_manual"),
            ("line-12", _rps(_blob(22, 0, 10), _blob(22, 0, 10), _blob(22, 0, 10)), t_a, t_b, _flat_img(), TAU_MANUAL, "zero_overlap_manual"),
            ("line-17-mu", _rps(t_a.copy(), t_a.copy(), t_a.copy()), t_a, t_b, _flat_img(), TAU_G1, "ratio_g1"),
            ("line-17-v", _rps(union, union.copy(), union.copy()), t_a, t_b, varied, TAU_G1, "ratio_g1"),
            ("line-19-mu", _rps(t_b.copy(), t_b.copy(), t_b.copy()), t_a, t_b, _flat_img(), TAU_G2, "ratio_g2"),
            ("line-19-v", _rps(union, union.copy(), union.copy()), t_a, t_b, varied_left, TAU_G2, "ratio_g2"),
            ("line-21-g1", _rps(t_shrunk, t_shrunk.copy(), t_shrunk.copy()), t_shrunk, t_shrunk.copy(), _flat_img(), TAU_G1, "psi_tie"),
            ("line-21-g2", _rps(t_shrunk, t_shrunk.copy(), t_shrunk.copy()), t_shift, t_shrunk, _flat_img(), TAU_G2, "psi_tie"),
            ("line-23", _rps(t_a.copy(), t_b.copy(), _blob(22, 0, 10)), t_a, t_b, _flat_img(), TAU_MANUAL, "psi_mismatch_manual"),
        ]
        failures = []
        for name, rps, t1, t2, img, want_tau, want_branch in cases:
            decision = tlsa(rps, t1, t2, img)
            if decision.tau != want_tau or decision.branch_taken != want_branch:
                failures.append(f"{name}: got ({decision.tau}, {decision.branch_taken})")
        _report(
            "algorithm-branch-coverage",
            not failures,
            "; ".join(failures) if failures else f"{len(cases)} fixtures hit every branch",
        )


class TestRcapLocality:
    def test_locality_and_determinism_200_masks(self):
        ok = True
        detail = ""
        for seed in range(200):
            rng = np.random.default_rng(seed)
            mask = rng.random((60, 60)) < rng.uniform(0.05, 0.5)
            w = int(rng.integers(3, 25))
            kappa = int(rng.integers(1, 5))
            cfg = RcapConfig(w=w, kappa=kappa, rng_seed=seed)
            out = rcap(mask, cfg)

            # independent replay of the documented draw order reconstructs the
            # chosen windows; the symmetric difference must stay inside them
            replay_rng = np.random.default_rng(seed)
            replay = mask.copy()
            window_cover = np.zeros_like(mask)
            for _ in range(kappa):
                fg = np.argwhere(replay)
                if fg.size == 0:
                    break
                seed_px = tuple(fg[int(replay_rng.integers(len(fg)))])
                direction = int(replay_rng.integers(1, 9))
                flag = int(replay_rng.integers(0, 2))
                half = w // 2
                r0 = max(seed_px[0] - half, 0)
                c0 = max(seed_px[1] - half, 0)
                window_cover[r0 : seed_px[0] - half + w, c0 : seed_px[1] - half + w] = True
                replay = apply_crop_paste(replay, seed_px, direction, flag, w)

            hamming = int((out ^ mask).sum())
            confined = not ((out ^ mask) & ~window_cover).any()
            deterministic = np.array_equal(out, rcap(mask, cfg))
            matches_replay = np.array_equal(out, replay)
            if not (hamming <= kappa * w * w and confined and deterministic and matches_replay):
                ok = False
                detail = f"seed {seed}: hamming={hamming} bound={kappa * w * w}"
                break
        _report("rcap-locality", ok, detail or "200 masks within bounds, deterministic")


class TestRcapSelectionTrend:
    def test_accuracy_rises_with_corruption(self, synthetic_env):
        started = time.monotonic()
        results = run_rcap_eval(
            synthetic_env["cfg"],
            prepared=synthetic_env["prepared"],
            proposals=synthetic_env["proposals"],
        )
        elapsed = time.monotonic() - started + synthetic_env["setup_seconds"]
        acc1 = results[1].mean_accuracy
        acc4 = results[4].mean_accuracy
        manual4 = results[4].frac_manual
        ok = acc4 >= acc1 and acc4 >= 0.80 and manual4 <= 0.35 and elapsed < 600
        _report(
            "rcap-selection-trend",
            ok,
            f"acc(k=1)={acc1:.3f} acc(k=4)={acc4:.3f} manual={manual4:.3f} {elapsed:.0f}s",
        )


class TestSegmentationFloor:
    def test_mean_dice_over_test_split(self, synthetic_env):
        prepared = synthetic_env["prepared"]
        test_ids = synthetic_env["test_ids"]
        dcs = []
        for image_id in test_ids:
            rps = synthetic_env["proposals"][image_id]
            roi = prepared.planes[image_id].roi
            target = prepared.labels[image_id]["G1"]
            for mask in rps.as_tuple():
                dcs.append(confusion(mask, target, roi).dc)
        mean_dc = float(np.mean(dcs))
        ok = mean_dc >= 0.5 and len(test_ids) >= 20
        _report(
            "segmentation-floor",
            ok,
            f"mean DC {mean_dc:.3f} over {len(test_ids)} test images x 3 proposals",
        )


class TestBaselineSeparability:
    def test_auc_and_sensitivity_on_thresholded_response(self, synthetic_env):
        prepared = synthetic_env["prepared"]
        train_id = prepared.split.train_ids[0]
        planes = prepared.planes[train_id]
        target = (bottom_hat(planes.base, 9) > 0.6) & planes.roi
        model = fit_baseline([(planes, target)])
        operating = next(p for p in model.roc if p[2] == model.theta)
        sen_at_op = operating[1]
        rps = predict_baseline(model, planes)
        sen_pred = confusion(rps.p2, target, planes.roi).sen
        ok = model.auc >= 0.99 and sen_at_op >= 0.9 and sen_pred >= 0.9
        _report(
            "baseline-separability",
            ok,
            f"AUC {model.auc:.4f}, operating-point sensitivity {sen_at_op:.3f}",
        )


class TestStoppingCriterion:
    def test_identical_windows_and_image_cap(self):
        hp = EsnHyperParams(m=20, n=4, c=2, w_m=10, branches=3, rng_seed=11, spectral_radius=0.2)
        model = init_paresn(hp)
        rng = np.random.default_rng(4)
        win = SubWindow(
            origin=(0, 0),
            height=10,
            width=10,
            planes=rng.random((4, 10, 10)),
            target=rng.random((10, 10)) < 0.4,
        )
        stopped_at = None
        for k in range(4):
            train_on_window(model, win)
            if check_stopping(model) and stopped_at is None:
                stopped_at = k + 1
        fast_stop = stopped_at is not None and stopped_at <= 3
        ssim_high = max(model.ssim_history[:2]) >= 0.99

        # eight images of one varied window each: the cap must end training
        capped = init_paresn(EsnHyperParams(m=20, n=4, c=2, w_m=30, branches=3, rng_seed=12))
        pairs = []
        vary = np.random.default_rng(9)
        for k in range(8):
            planes = PreprocessedPlanes(
                base=np.clip(vary.random((30, 30)) * vary.uniform(0.05, 1.0) + vary.uniform(0, 0.9), 0, 1),
                bottom_hat=vary.random((30, 30)),
                grad_mag=vary.random((30, 30)),
                grad_dir=vary.random((30, 30)),
                roi=np.ones((30, 30), dtype=bool),
            )
            pairs.append((planes, vary.random((30, 30)) < 0.4))
        train_paresn(capped, pairs)
        cap_holds = capped.images_seen <= 5 and capped.trained
        _report(
            "stopping-criterion",
            fast_stop and ssim_high and cap_holds,
            f"stopped after window {stopped_at}, first SSIMs {np.round(model.ssim_history[:2], 4)}, "
            f"cap consumed {capped.images_seen} images",
        )


class TestEndToEndDeterminism:
    def test_select_twice_byte_identical(self, tmp_path):
        stack = tmp_path / "det_stack"
        records, gt = generate_synthetic_stack(SynthConfig(num_images=10, rng_seed=13))
        save_stack(records, stack, gt=gt)
        cfg_file = tmp_path / "det.cfg"
        cfg_file.write_text(f"stack_dir={stack}\nesn_m=30\nfigures=false\n")
        outs = []
        for run in ("a", "b"):
            out = tmp_path / f"run_{run}"
            code = cli_main(
                ["select", "--config", str(cfg_file), "--seed", "2", "--out", str(out)]
            )
            assert code == 0
            outs.append((out / "decisions.jsonl").read_bytes())
        ok = outs[0] == outs[1] and len(outs[0]) > 0
        _report("end-to-end-determinism", ok, f"{len(outs[0])} bytes identical")


class TestServiceRoundTrip:
    def test_queue_decision_and_replay(self, tmp_path):
        stack_dir = tmp_path / "svc_stack"
        records, gt = generate_synthetic_stack(SynthConfig(num_images=6, rng_seed=17))
        save_stack(records, stack_dir, gt=gt)
        rps_dir = tmp_path / "svc_rps"
        rps_dir.mkdir()
        rows = []
        rng = np.random.default_rng(2)
        for i, rec in enumerate(records):
            rows.append(
                {
                    "id": rec.id,
                    "tau": "Manual" if i < 3 else "G1",
                    "ratio_mu": 1.0,
                    "ratio_v": 1.0,
                    "eta": 1,
                    "phi_pi": 0.5,
                    "psi_star": [1, 2],
                    "branch_taken": "small_diff_rp_disagree_manual",
                    "model_source": "fixture",
                }
            )
            for name in ("P1", "P2", "P3"):
                save_mask_png(rng.random((300, 300)) < 0.05, rps_dir / f"{rec.id}.{name}.png")
        decisions = tmp_path / "decisions.jsonl"
        decisions.write_text("".join(json.dumps(r) + "\n" for r in rows))

        store = build_queue(decisions, stack_dir, tmp_path / "queue", rps_dir=rps_dir)
        three_pending = len(store.pending()) == 3

        httpd = make_server(store, port=0)
        thread = threading.Thread(target=httpd.serve_forever, daemon=True)
        thread.start()
        base = f"http://127.0.0.1:{httpd.server_address[1]}"
        try:
            target = store.pending()[0].id
            req = urllib.request.Request(
                base + "/api/decision",
                data=json.dumps({"id": target, "choice": "G2", "reviewer": "qa"}).encode(),
                headers={"Content-Type": "application/json"},
                method="POST",
            )
            with urllib.request.urlopen(req) as resp:
                posted = resp.status == 200
            with urllib.request.urlopen(base + "/api/queue") as resp:
                payload = json.loads(resp.read())
            two_pending = len(payload["pending"]) == 2
        finally:
            httpd.shutdown()
            thread.join(timeout=5)

        replayed = QueueStore.open(store.store_dir)
        replay_matches = (
            len(replayed.pending()) == 2 and replayed.items[target].status == "decided"
        )
        _report(
            "service-round-trip",
            three_pending and posted and two_pending and replay_matches,
            "3 pending -> decision -> 2 pending, log replay consistent",
        )
