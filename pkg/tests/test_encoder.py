import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vertikit.checkpoint import load_checkpoint
from vertikit.codec import PatchCodec
from vertikit.encoder import (D_MODEL, N_OBS, N_TOKENS, ContextEncoder, EncoderConfig, ObservationWindow,
                              PretrainConfig, encode_sequence, load_encoder, mask_count, mask_tokens, pretext_loss,
                              pretext_terms, pretrain, random_mask, token_layout, tokenize_window)
from vertikit.errors import ConfigError, DataError, IntegrityError, ShapeError, TrainingError

from gradcheck import assert_gradients


@pytest.fixture(scope="module")
def codec():
    torch.manual_seed(0)
    return PatchCodec().eval()


@pytest.fixture(scope="module")
def encoder():
    torch.manual_seed(1)
    return ContextEncoder().eval()


def _window(seed=0, next_patch=True):
    rng = np.random.default_rng(seed)
    poses = np.zeros((20, 6))
    poses[:, 0] = np.arange(20) * 0.05 + rng.uniform(-1, 1)
    poses[:, 5] = rng.uniform(-0.1, 0.1, 20)
    return ObservationWindow(rng.uniform(-1, 1, (20, 40, 40)).astype(np.float32),
                             rng.uniform(-1, 1, (20, 2)).astype(np.float32), poses.astype(np.float32),
                             rng.uniform(-1, 1, (40, 40)).astype(np.float32) if next_patch else None)


def test_parameter_budget_and_structure(encoder):
    assert abs(encoder.param_count() - 0.88e6) <= 0.15 * 0.88e6
    assert len(encoder.blocks) == 4 and all(b.heads == 4 for b in encoder.blocks)
    assert encoder.positional.shape == (61, 128) and encoder.modality.shape == (3, 128)


def test_tokenize_61_tokens(codec, encoder):
    with torch.no_grad():
        seq = tokenize_window(_window(), codec, encoder)
    assert len(seq) == N_TOKENS == 61 and seq.tokens.shape == (61, D_MODEL)
    assert seq.modalities[0] == "ctx"


def test_sequential_layout(codec, encoder):
    with torch.no_grad():
        tags = tokenize_window(_window(), codec, encoder).modalities
    assert tags[1:21] == ["patch"] * 20 and tags[21:41] == ["action"] * 20 and tags[41:] == ["pose"] * 20


def test_interleaved_layout(codec):
    enc = ContextEncoder(EncoderConfig(ordering="interleaved"))
    with torch.no_grad():
        tags = tokenize_window(_window(), codec, enc).modalities
    assert tags[1:7] == ["patch", "action", "pose", "patch", "action", "pose"]
    assert tags[1:] == ["patch", "action", "pose"] * 20


def test_ordering_mismatch_and_bad_window(codec, encoder):
    with pytest.raises(ConfigError):
        tokenize_window(_window(), codec, encoder, ordering="interleaved")
    w = _window()
    with pytest.raises(ShapeError):
        ObservationWindow(w.patches[:19], w.actions[:19], w.poses[:19])


def test_orderings_hold_same_token_multiset(codec):
    seq_enc = ContextEncoder(EncoderConfig(ordering="sequential"))
    int_enc = ContextEncoder(EncoderConfig(ordering="interleaved"))
    int_enc.load_state_dict(seq_enc.state_dict())
    with torch.no_grad():
        a = tokenize_window(_window(), codec, seq_enc).raw.numpy()
        b = tokenize_window(_window(), codec, int_enc).raw.numpy()
    assert not np.array_equal(a, b)
    assert np.array_equal(a[np.lexsort(a.T)], b[np.lexsort(b.T)])


def test_mask_75_percent(codec, encoder):
    with torch.no_grad():
        seq = tokenize_window(_window(), codec, encoder)
        masked, positions = mask_tokens(seq, 0.75, seed=3, params=encoder)
    assert len(positions) == 45 and 0 not in positions and max(positions) <= 60
    assert torch.equal(masked.tokens[0], seq.tokens[0])
    for i in range(1, 61):
        assert torch.equal(masked.tokens[i], seq.tokens[i]) == (i not in positions)


def test_mask_ratio_zero_is_identity(codec, encoder):
    with torch.no_grad():
        seq = tokenize_window(_window(), codec, encoder)
        masked, positions = mask_tokens(seq, 0.0, seed=3, params=encoder)
    assert positions == frozenset() and torch.equal(masked.tokens, seq.tokens)


def test_mask_seeded(codec, encoder):
    with torch.no_grad():
        seq = tokenize_window(_window(), codec, encoder)
        sets = [mask_tokens(seq, 0.75, s, encoder)[1] for s in range(200)]
        again = [mask_tokens(seq, 0.75, s, encoder)[1] for s in range(100)]
    assert sets[:100] == again
    assert all(sets[2 * i] != sets[2 * i + 1] for i in range(100))


@pytest.mark.parametrize("ratio", [-0.1, 1.5])
def test_out_of_range_ratio_rejected(ratio):
    with pytest.raises(ConfigError):
        mask_count(ratio)
    with pytest.raises(ConfigError):
        PretrainConfig(mask_ratio=ratio).validate()


@given(st.floats(0, 1))
def test_mask_count_is_rounded_fraction(ratio):
    k = mask_count(ratio)
    assert abs(k - ratio * 60) <= 0.5
    m = random_mask(3, ratio, torch.Generator().manual_seed(0))
    assert m.shape == (3, N_OBS) and (m.sum(1) == k).all()


def test_mask_counts_over_1000_draws():
    g = torch.Generator().manual_seed(0)
    for ratio, k in ((0.75, 45), (0.9, 54), (0.5, 30), (1.0, 60)):
        assert (random_mask(1000, ratio, g).sum(1) == k).all()
    # each observation position is hit: selection is uniform, not stratified
    hits = random_mask(1000, 0.75, g).float().mean(0)
    assert hits.min() > 0.6 and hits.max() < 0.9


def test_encode_widths_and_determinism(codec, encoder):
    with torch.no_grad():
        seq = tokenize_window(_window(), codec, encoder)
        ctx, out = encode_sequence(seq, encoder)
        ctx2, out2 = encode_sequence(seq, encoder)
    assert ctx.shape == (128,) and out.shape == (61, 128)
    assert torch.equal(ctx, ctx2) and torch.equal(out, out2)


def test_eval_path_uses_no_mask(codec, encoder):
    w = _window()
    with torch.no_grad():
        seq = tokenize_window(w, codec, encoder)
        unmasked, positions = mask_tokens(seq, 0.0, 0, encoder)
        emb = codec.encode(torch.as_tensor(w.patches))[None]
        ctx = encoder.context(emb, torch.as_tensor(w.actions)[None],
                              torch.as_tensor(w.relative_poses(), dtype=torch.float32)[None])
    assert positions == frozenset()
    assert torch.allclose(ctx[0], encode_sequence(unmasked, encoder)[0], atol=1e-6)


def test_width_mismatch(encoder):
    with pytest.raises(ShapeError):
        encoder.run(torch.zeros(1, 61, 64))
    with pytest.raises(ShapeError):
        encoder.raw_tokens(torch.zeros(1, 20, 64), torch.zeros(1, 20, 2), torch.zeros(1, 20, 6))


def test_hidden_current_action(encoder):
    g = torch.Generator().manual_seed(0)
    e, a, p = torch.randn(2, 20, 128, generator=g), torch.randn(2, 20, 2, generator=g), torch.randn(2, 20, 6, generator=g)
    a2 = a.clone()
    a2[:, -1] += 5.0
    with torch.no_grad():
        assert torch.equal(encoder.context(e, a, p, True), encoder.context(e, a2, p, True))
        assert not torch.equal(encoder.context(e, a, p), encoder.context(e, a2, p))
    assert token_layout(encoder.ordering)[encoder.current_action_position()].tolist() == [1, 19]


def test_pretext_total_zero_at_exact_fit(encoder):
    g = torch.Generator().manual_seed(0)
    e, a, p = torch.randn(2, 20, 128, generator=g), torch.randn(2, 20, 2, generator=g), torch.randn(2, 20, 6, generator=g)
    mask = random_mask(2, 0.75, g)
    with torch.no_grad():
        ctx, out, _ = encoder(e, a, p, mask)
        total, nt, mt = pretext_terms(encoder, e, a, p, ctx, mask, targets=out[:, 1:])
    assert total.item() == nt.item() == mt.item() == 0.0


def test_lambda_mask_zero(encoder):
    g = torch.Generator().manual_seed(0)
    e, a, p, n = (torch.randn(2, 20, 128, generator=g), torch.randn(2, 20, 2, generator=g),
                  torch.randn(2, 20, 6, generator=g), torch.randn(2, 128, generator=g))
    mask = random_mask(2, 0.75, g)
    with torch.no_grad():
        total, nt, mt = pretext_terms(encoder, e, a, p, n, mask, lambda_mask=0.0)
    assert mt.item() > 0 and total.item() == nt.item()


@pytest.mark.parametrize("seed", range(5))
def test_masked_term_matches_gather_oracle(encoder, seed):
    g = torch.Generator().manual_seed(seed)
    e, a, p, n = (torch.randn(3, 20, 128, generator=g), torch.randn(3, 20, 2, generator=g),
                  torch.randn(3, 20, 6, generator=g), torch.randn(3, 128, generator=g))
    mask = random_mask(3, 0.75, g)
    with torch.no_grad():
        _, _, mt = pretext_terms(encoder, e, a, p, n, mask)
        _, out, raw = encoder(e, a, p, mask)
    out, raw, m = out.double().numpy(), raw.double().numpy(), mask.numpy()
    sq = [np.mean((out[b, 1 + i] - raw[b, i]) ** 2) for b in range(3) for i in range(N_OBS) if m[b, i]]
    assert abs(mt.item() - np.mean(sq)) < 1e-7


def test_pretext_loss_single_window(codec, encoder):
    with torch.no_grad():
        total, nt, mt = pretext_loss(_window(), codec, encoder, mask_seed=0)
        again = pretext_loss(_window(), codec, encoder, mask_seed=0)
    assert total.item() == pytest.approx(nt.item() + mt.item())
    assert total.item() == again[0].item()
    with pytest.raises(DataError):
        pretext_loss(_window(next_patch=False), codec, encoder, 0)


@settings(max_examples=10, deadline=None)
@given(st.integers(-1000, 1000), st.integers(-1000, 1000), st.integers(-20, 20))
def test_translation_invariance(codec, encoder, dx, dy, dz):
    w = _window(3)
    shifted = ObservationWindow(w.patches, w.actions, w.poses.astype(np.float64) + [dx, dy, dz, 0, 0, 0],
                                w.next_patch)
    with torch.no_grad():
        assert torch.equal(tokenize_window(w, codec, encoder).raw, tokenize_window(shifted, codec, encoder).raw)
        assert pretext_loss(w, codec, encoder, 1)[0].item() == pretext_loss(shifted, codec, encoder, 1)[0].item()


def test_gradient_check_pretext():
    torch.manual_seed(0)
    enc = ContextEncoder().double()
    g = torch.Generator().manual_seed(1)
    e = torch.randn(2, 20, 128, generator=g, dtype=torch.float64)
    a = torch.randn(2, 20, 2, generator=g, dtype=torch.float64)
    p = torch.randn(2, 20, 6, generator=g, dtype=torch.float64)
    n = torch.randn(2, 128, generator=g, dtype=torch.float64)
    mask = random_mask(2, 0.75, g)
    with torch.no_grad():
        targets = enc.raw_tokens(e, a, p)  # frozen targets: finite differences must not move them
    assert_gradients(lambda: pretext_terms(enc, e, a, p, n, mask, targets=targets)[0], enc.parameters())


def _synthetic_tensors(n=24, seed=0):
    from vertikit.dataset import Episode, build_windows
    from vertikit.encoder import WindowTensors

    rng = np.random.default_rng(seed)
    frames = n + 20
    poses = np.zeros((frames, 6), np.float32)
    poses[:, 0] = np.arange(frames) * 0.1
    ep = Episode(rng.random((frames, 40, 40), dtype=np.float32), rng.random((frames, 2), dtype=np.float32),
                 poses, 0, 0, "train")
    w = build_windows([ep])
    return WindowTensors(w, rng.standard_normal((frames, 128)).astype(np.float32))


def test_pretrain_log_checkpoint_and_determinism(tmp_path):
    data = _synthetic_tensors()
    cfg = PretrainConfig(epochs=2, batch_size=8, seed=5)
    a = pretrain(data, cfg, "c" * 64, test=data, log_path=tmp_path / "pretext_log.csv")
    b = pretrain(data, cfg, "c" * 64)
    assert a.checksum == b.checksum
    assert a.meta["codec_checksum"] == "c" * 64
    lines = (tmp_path / "pretext_log.csv").read_text().splitlines()
    assert lines[0] == "epoch,split,total,next_patch_term,masked_term"
    assert [l.split(",")[:2] for l in lines[1:]] == [["0", "train"], ["0", "test"], ["1", "train"], ["1", "test"]]
    a.save(tmp_path / "enc.vckpt")
    enc, ck = load_encoder(tmp_path / "enc.vckpt", "c" * 64)
    assert ck.checksum == a.checksum and not enc.training
    with pytest.raises(IntegrityError):
        load_encoder(tmp_path / "enc.vckpt", "d" * 64)


def test_pretrain_only_touches_encoder_parameters(tiny):
    before = load_checkpoint(tiny.codec_path).checksum
    ckpt = pretrain(tiny.data["train"].tensors, PretrainConfig(epochs=1, max_windows=16, batch_size=8),
                    tiny.codec_checksum)
    assert set(ckpt.tensors) == set(ContextEncoder().state_dict())
    assert load_checkpoint(tiny.codec_path).checksum == before == tiny.codec_checksum


def test_pretrain_nan_raises():
    data = _synthetic_tensors()
    data.emb[:] = float("nan")
    with pytest.raises(TrainingError) as exc:
        pretrain(data, PretrainConfig(epochs=1, batch_size=8), "c" * 64)
    assert exc.value.step == 0


@pytest.mark.slow
def test_permuting_patch_tokens_changes_ctx(desk):
    enc = desk.backbone(0.75, 0).encoder
    t = desk.data["test"].tensors
    e, a, p, _ = t.batch([5])
    swapped = e.clone()
    swapped[:, [3, 11]] = e[:, [11, 3]]
    assert not torch.equal(swapped, e)
    with torch.no_grad():
        c0, c1 = enc.context(e, a, p), enc.context(swapped, a, p)
    assert (c0 - c1).abs().max().item() > 1e-4
