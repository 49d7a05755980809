"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line."""

import contextlib
import io
import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import mugcp.mpf
from mugcp import tensor as T
from mugcp.amg import AMGWeights, amg_forward, amg_variant
from mugcp.backbone import SyntheticInstance
from mugcp.checkpoint import load_checkpoint, save_checkpoint
from mugcp.cli import main
from mugcp.config import load_config
from mugcp.model import MuGCP
from mugcp.mpf import forward_dual_encoder, predict, text_layout
from mugcp.objectives import cc_loss, ce_loss
from mugcp.state import PromptConfig, amg_prefix, as_tensors, init_state
from mugcp.tensor import Tape, Tensor
from mugcp.trainer import gradcheck_total_loss, harmonic_mean, run_experiment

from conftest import DEFAULT_CONFIG, TOY_CONFIG
from test_amg import amg_params
from test_mpf import fusion_errors
from test_scp import cache_equivalence_errors


@pytest.fixture
def criterion(capsys):
    @contextlib.contextmanager
    def check(number, title):
        try:
            yield
        except BaseException:
            with capsys.disabled():
                print(f"\nACCEPTANCE {number} {title}: FAIL")
            raise
        with capsys.disabled():
            print(f"\nACCEPTANCE {number} {title}: PASS")
    return check


class Counter:
    def __init__(self):
        self.n = 0

    def __call__(self):
        self.n += 1


# -- 1 ----------------------------------------------------------------------------

def test_1_harmonic_mean(criterion):
    with criterion(1, "harmonic mean values"):
        assert abs(harmonic_mean(87.08, 77.53) - 82.03) <= 0.01
        assert abs(harmonic_mean(69.34, 74.22) - 71.70) <= 0.01


# -- 2 ----------------------------------------------------------------------------

def test_2_gradient_suite(criterion):
    with criterion(2, "toy gradient check < 1e-4 in < 60 s"):
        exp = load_config(TOY_CONFIG)
        b, p = exp.backbone, exp.prompt
        assert (b.d_text, b.d_img, b.d_mllms, p.n_cond, p.n_ctx, b.n_patches, b.name_len,
                exp.data.n_base, b.depth) == (8, 12, 16, 4, 2, 4, 2, 3, 2)
        started = time.perf_counter()
        report, state = gradcheck_total_loss(exp, exp.train.seeds[0])
        elapsed = time.perf_counter() - started
        assert set(report.errors) == set(state)
        assert all(report.numeric[k].dtype == np.float64 for k in report.numeric)
        assert report.max_error < 1e-4, report.failures(1e-4)
        assert elapsed < 60, f"{elapsed:.1f} s"


# -- 3 ----------------------------------------------------------------------------

def test_3_kv_cache_equivalence(criterion, default_backbone):
    with criterion(3, "KV-cache equivalence on 100 instances in < 10 s"):
        started = time.perf_counter()
        errors = cache_equivalence_errors(default_backbone, 100, seed=2024)
        elapsed = time.perf_counter() - started
        assert len(errors) == 100
        assert max(errors) < 1e-10, max(errors)
        assert elapsed < 10, f"{elapsed:.1f} s"


# -- 4 ----------------------------------------------------------------------------

def test_4_fusion_oracle(criterion):
    with criterion(4, "fusion oracle on 1000 draws"):
        assert fusion_errors(1000, seed=99) < 1e-12


# -- 5 ----------------------------------------------------------------------------

def _instance(backbone, seed):
    c = backbone.config
    rng = np.random.default_rng(seed)
    caption = tuple(int(t) for t in rng.integers(0, c.caption_vocab, size=c.caption_len))
    return SyntheticInstance(f"s{seed}", rng.normal(size=c.d_feature), 0, caption, "test")


def test_5_structural_ablations(criterion, toy_backbone, monkeypatch):
    with criterion(5, "structural ablations"):
        c = toy_backbone.config
        m, n, L = 2, 4, c.name_len
        expected = {"add": 1 + m + L + 1, "concat": 1 + m + L + n + 1, "both": 1 + m + L + n + 1}
        real_assemble, real_fuse, real_layer = (mugcp.mpf.assemble_text_sequence,
                                                mugcp.mpf.fuse_prompts, mugcp.mpf.text_layer)
        for mode, length in expected.items():
            blocks, fused, widths = [], [], []

            def assemble(sos, p_ta, words, p_td, eos):
                blocks.append((p_ta, p_td))
                return real_assemble(sos, p_ta, words, p_td, eos)

            def fuse(p_ctx, p_cond):
                out = real_fuse(p_ctx, p_cond)
                fused.append(out)
                return out

            def layer(bb, x, i):
                widths.append(x.shape[1])
                return real_layer(bb, x, i)

            monkeypatch.setattr(mugcp.mpf, "assemble_text_sequence", assemble)
            monkeypatch.setattr(mugcp.mpf, "fuse_prompts", fuse)
            monkeypatch.setattr(mugcp.mpf, "text_layer", layer)
            cfg = PromptConfig(n_cond=n, n_ctx=m, mpf_mode=mode)
            state = init_state(toy_backbone, cfg, 1)
            forward_dual_encoder(toy_backbone, state, _instance(toy_backbone, 0), [0, 1, 2], cfg)
            assert widths == [length] * c.depth
            assert text_layout(mode, m, L, n)["eos"].stop == length
            assert len(blocks) == c.depth
            for i, (ctx_block, cond_block) in enumerate(blocks):
                assert (cond_block is None) == (mode == "add")
                if mode == "concat":
                    assert ctx_block is state[f"ctx.text.{i}"]
                else:
                    assert any(ctx_block is f for f in fused)
                    assert not np.array_equal(ctx_block.data, state[f"ctx.text.{i}"].data)
            if mode == "concat":
                assert not fused

        rng = np.random.default_rng(5)
        for seed in range(100):
            self_only = amg_variant(AMGWeights.from_mapping(as_tensors(amg_params(seed, "self-only")),
                                                            "amg"), "self-only", 2)
            p_td = Tensor(rng.normal(size=(3, 8)))
            f1, f2 = Tensor(rng.normal(size=(4, 12))), Tensor(rng.normal(size=(4, 12)))
            assert self_only(p_td, f1).data.tobytes() == self_only(p_td, f2).data.tobytes()

        cfg = PromptConfig(n_cond=n, n_ctx=m, amg_shared=True)
        shared = init_state(toy_backbone, cfg, 3)
        p_td, f_x = Tensor(rng.normal(size=(n, 8))), Tensor(rng.normal(size=(c.n_patches, 12)))
        outs = {amg_forward(p_td, f_x, AMGWeights.from_mapping(shared, amg_prefix(cfg, i)),
                            c.heads).data.tobytes() for i in range(c.depth)}
        assert len(outs) == 1


# -- 6 ----------------------------------------------------------------------------

@pytest.mark.slow
def test_6_fewshot_convergence(criterion):
    with criterion(6, "default few-shot convergence on seeds 1,2,3 in < 5 min"):
        exp = load_config(DEFAULT_CONFIG)
        assert (exp.data.n_base, exp.train.shots, exp.train.epochs, exp.train.seeds) == \
            (8, 4, 20, (1, 2, 3))
        started = time.perf_counter()
        result = run_experiment(exp)
        elapsed = time.perf_counter() - started
        for m in result.record.per_seed:
            assert m.train_acc >= 0.95, (m.seed, m.train_acc)
            first = m.epoch_losses[:5]
            assert all(a > b for a, b in zip(first, first[1:])), (m.seed, first)
            assert all(math.isfinite(v) for v in (m.base_acc, m.new_acc, m.hm))
            assert math.isclose(m.hm, harmonic_mean(m.base_acc, m.new_acc), abs_tol=1e-12)
        assert elapsed < 300, f"{elapsed:.1f} s"


# -- 7 ----------------------------------------------------------------------------

def _cli(*argv):
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = main([str(a) for a in argv])
    assert code == 0, (argv, code)
    return buf.getvalue()


def _run_every_command(root):
    ckpt = root / "train" / "checkpoints" / "seed_1"
    stdout = {
        "train": _cli("train", TOY_CONFIG, "--out", root / "train"),
        "eval": _cli("eval", ckpt, TOY_CONFIG, "--out", root / "eval.json"),
        "ablate": _cli("ablate", TOY_CONFIG, "--grid", "amg_mode=full,self-only",
                       "--out", root / "ablate"),
        "dump": _cli("dump-embeddings", ckpt, TOY_CONFIG, "--out", root / "emb.csv"),
        "render": _cli("render-templates", "--class", "balance beam", "--description",
                       "olympic competition", "--out", root / "templates"),
        "gradcheck": _cli("gradcheck", TOY_CONFIG),
    }
    files = {p.relative_to(root).as_posix(): p.read_bytes()
             for p in sorted(root.rglob("*")) if p.is_file() and p.name != "timing.json"}
    stdout["render"] = stdout["render"].replace(str(root), "ROOT")
    stdout["dump"] = stdout["dump"].replace(str(root), "ROOT")
    return stdout, files


def test_7_determinism(criterion, tmp_path):
    with criterion(7, "byte-identical reruns of every command"):
        first_out, first_files = _run_every_command(tmp_path / "a")
        second_out, second_files = _run_every_command(tmp_path / "b")
        assert first_out == second_out
        assert set(first_files) == set(second_files)
        assert {"train/metrics.json", "train/checkpoints/seed_1/weights.bin",
                "ablate/metrics.csv", "emb.csv", "eval.json"} <= set(first_files)
        for name in first_files:
            assert first_files[name] == second_files[name], name


# -- 8 ----------------------------------------------------------------------------

SEEDS = st.integers(0, 2**32 - 1)
CASES = 100


def _battery(prop, *strategies):
    seen = Counter()

    @settings(max_examples=CASES, deadline=None, database=None)
    @given(st.tuples(*strategies))
    def run(args):
        seen()
        prop(*args)

    run()
    assert seen.n >= CASES, seen.n


def _softmax(seed, rows, cols, scale):
    x = np.random.default_rng(seed).normal(0.0, scale, size=(rows, cols))
    p = T.softmax(Tensor(x), axis=-1).data
    assert np.all(p >= 0) and np.all(p <= 1)
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-12)


def _cc(seed):
    rng = np.random.default_rng(seed)
    u, v, w = rng.normal(size=(3, 6))
    a, b = rng.uniform(0.1, 10, size=2)
    assert 0.0 <= cc_loss(u, v, w, rng.normal(size=6)).item() <= 4.0
    v_perp = v - (v @ u) / (u @ u) * u
    w_perp = w - (w @ v) / (v @ v) * v
    assert abs(cc_loss(u, a * u, v, b * v).item() - 0.0) < 1e-12
    assert abs(cc_loss(u, -a * u, v, -b * v).item() - 4.0) < 1e-12
    assert abs(cc_loss(u, v_perp, v, w_perp).item() - 2.0) < 1e-12


def _ce_uniform(seed, k):
    rng = np.random.default_rng(seed)
    f, row = rng.normal(size=5), rng.normal(size=5)
    loss = ce_loss(f, np.tile(row, (k, 1)), int(rng.integers(0, k)), None,
                   float(rng.uniform(0.01, 1.0))).item()
    assert math.isclose(loss, math.log(k), rel_tol=1e-12, abs_tol=1e-15)


def _predict_tau(seed, k, tau):
    rng = np.random.default_rng(seed)
    f, t = rng.normal(size=6), rng.normal(size=(k, 6))
    cos = np.sort((t @ f) / np.linalg.norm(t, axis=1) / np.linalg.norm(f))
    if cos[-1] - cos[-2] > 1e-9:
        assert int(np.argmax(predict(f, t, tau).data)) == int(np.argmax(predict(f, t, 1.0).data))


def _frozen(backbone, seed):
    before = backbone.fingerprint()
    model = MuGCP(backbone, PromptConfig(n_cond=4, n_ctx=2))
    state = model.init_state(seed % 1000)
    rng = np.random.default_rng(seed)
    inst = _instance(backbone, seed)
    with Tape() as tape:
        loss, _, _ = model.loss(state, inst, [0, 1, 2], rng.normal(size=8), rng.normal(size=8), 8.0)
    tape.backward(loss)
    assert backbone.fingerprint() == before
    name = sorted(backbone)[seed % len(backbone)]
    with pytest.raises(ValueError):
        backbone.array(name)[(0,) * backbone.array(name).ndim] = 1.0


def _checkpoint(seed, n, tag):
    import tempfile
    rng = np.random.default_rng(seed)
    dtype = np.float32 if tag == "f32" else np.float64
    params = {f"t{i}": rng.normal(size=tuple(rng.integers(0, 4, size=rng.integers(0, 4))))
              .astype(dtype) for i in range(n)}
    with tempfile.TemporaryDirectory() as d:
        save_checkpoint(f"{d}/a", params)
        loaded = load_checkpoint(f"{d}/a")
        assert all(loaded[k].tobytes() == params[k].tobytes() and loaded[k].shape == params[k].shape
                   for k in params)
        save_checkpoint(f"{d}/b", loaded)
        for f in ("manifest.json", "weights.bin"):
            assert open(f"{d}/a/{f}", "rb").read() == open(f"{d}/b/{f}", "rb").read()


def test_8_invariant_batteries(criterion, toy_backbone):
    with criterion(8, "invariant batteries, >= 100 cases each"):
        _battery(_softmax, SEEDS, st.integers(1, 5), st.integers(1, 9), st.floats(0.1, 50))
        _battery(_cc, SEEDS)
        _battery(_ce_uniform, SEEDS, st.integers(1, 12))
        _battery(_predict_tau, SEEDS, st.integers(2, 8), st.floats(1e-3, 10.0))
        _battery(lambda seed: _frozen(toy_backbone, seed), SEEDS)
        _battery(_checkpoint, SEEDS, st.integers(1, 5), st.sampled_from(["f32", "f64"]))
