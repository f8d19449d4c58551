import numpy as np
import pytest

from aucues import swin
from aucues.losses import masked_bce, masked_bce_grad
from aucues.swin import ModelConfig, ShapeError

rng = np.random.default_rng(0)
CFG = ModelConfig()
PARAMS = swin.init_params(CFG)


# -- straight-line reference forward (independent of the autodiff path) -------


def ref_layernorm(x, scale, offset, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * scale + offset


def ref_softmax(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def ref_gelu(x):
    from scipy.special import erf

    return 0.5 * x * (1 + erf(x / np.sqrt(2)))


def ref_forward(image, params, cfg):
    """Loop-based reimplementation of the whole pipeline for one image."""
    n, p, d, h = cfg.grid, cfg.patch_size, cfg.embed_dim, cfg.heads
    m = cfg.window
    dh = d // h
    tokens = np.zeros((n, n, d))
    for i in range(n):
        for j in range(n):
            patch = image[i * p:(i + 1) * p, j * p:(j + 1) * p].reshape(-1)
            tokens[i, j] = patch @ params["patch.weight"] + params["patch.bias"]

    for blk in range(cfg.n_blocks):
        shift = (m // 2) if blk % 2 == 1 else 0
        x = ref_layernorm(tokens, params[f"block{blk}.ln1.scale"],
                          params[f"block{blk}.ln1.offset"])
        if shift:
            x = np.roll(x, (-shift, -shift), axis=(0, 1))
        out = np.zeros_like(x)
        for wi in range(n // m):
            for wj in range(n // m):
                win = x[wi * m:(wi + 1) * m, wj * m:(wj + 1) * m].reshape(m * m, d)
                q = win @ params[f"block{blk}.attn.wq.weight"] + params[f"block{blk}.attn.wq.bias"]
                k = win @ params[f"block{blk}.attn.wk.weight"] + params[f"block{blk}.attn.wk.bias"]
                v = win @ params[f"block{blk}.attn.wv.weight"] + params[f"block{blk}.attn.wv.bias"]
                merged = np.zeros((m * m, d))
                for head in range(h):
                    sl = slice(head * dh, (head + 1) * dh)
                    attn = ref_softmax(q[:, sl] @ k[:, sl].T / np.sqrt(dh))
                    merged[:, sl] = attn @ v[:, sl]
                win_out = merged @ params[f"block{blk}.attn.wo.weight"] + \
                    params[f"block{blk}.attn.wo.bias"]
                out[wi * m:(wi + 1) * m, wj * m:(wj + 1) * m] = win_out.reshape(m, m, d)
        if shift:
            out = np.roll(out, (shift, shift), axis=(0, 1))
        tokens = tokens + out
        y = ref_layernorm(tokens, params[f"block{blk}.ln2.scale"],
                          params[f"block{blk}.ln2.offset"])
        y = ref_gelu(y @ params[f"block{blk}.mlp.fc1.weight"] + params[f"block{blk}.mlp.fc1.bias"])
        y = y @ params[f"block{blk}.mlp.fc2.weight"] + params[f"block{blk}.mlp.fc2.bias"]
        tokens = tokens + y

    pooled = tokens.reshape(-1, d).mean(axis=0)
    return pooled @ params["head.weight"] + params["head.bias"]


# -- patch embedding -----------------------------------------------------------


def test_patch_embed_zero_image():
    params = dict(PARAMS)
    params["patch.bias"] = np.zeros_like(params["patch.bias"])
    tokens = swin.patch_embed(np.zeros((32, 32)), params, CFG)
    assert tokens.shape == (1, 8, 8, 32)
    assert (tokens == 0).all()


def test_patch_embed_one_hot_basis():
    # projection row r copied through for a one-hot patch pixel r
    params = dict(PARAMS)
    params["patch.bias"] = np.zeros_like(params["patch.bias"])
    image = np.zeros((32, 32))
    image[1, 2] = 1.0  # patch (0,0), within-patch offset (1,2) -> row 6
    tokens = swin.patch_embed(image, params, CFG)
    np.testing.assert_allclose(tokens[0, 0, 0], params["patch.weight"][6])


def test_patch_embed_matches_loop_oracle():
    image = rng.normal(size=(32, 32))
    tokens = swin.patch_embed(image, PARAMS, CFG)[0]
    for i in range(8):
        for j in range(8):
            patch = image[i * 4:(i + 1) * 4, j * 4:(j + 1) * 4].reshape(-1)
            expected = patch @ PARAMS["patch.weight"] + PARAMS["patch.bias"]
            np.testing.assert_allclose(tokens[i, j], expected, atol=1e-12)


def test_patch_embed_rejects_wrong_size():
    with pytest.raises(ShapeError):
        swin.patch_embed(np.zeros((16, 16)), PARAMS, CFG)


# -- cyclic shift ---------------------------------------------------------------


def test_cyclic_shift_identity_and_inverse():
    t = rng.normal(size=(2, 8, 8, 4))
    np.testing.assert_array_equal(swin.cyclic_shift(t, 0), t)
    np.testing.assert_array_equal(
        swin.cyclic_shift(swin.cyclic_shift(t, 3), 8 - 3), t)


def test_cyclic_shift_index_oracle():
    side = 4
    grid = np.arange(side * side).reshape(side, side)[..., None]
    shifted = swin.cyclic_shift(grid, 2)
    for i in range(side):
        for j in range(side):
            assert shifted[i, j, 0] == grid[(i + 2) % side, (j + 2) % side, 0]


def test_cyclic_shift_rejects_bad_offset():
    with pytest.raises(ShapeError):
        swin.cyclic_shift(np.zeros((4, 4, 2)), 4)


# -- window attention ------------------------------------------------------------


def test_single_token_window_is_value_projection():
    cfg = ModelConfig(image_size=4, patch_size=4, window=1, embed_dim=8, heads=2)
    params = swin.init_params(cfg)
    x = rng.normal(size=(1, 8))
    out = swin.window_attention(x, params, cfg, block=0)
    v = x @ params["block0.attn.wv.weight"] + params["block0.attn.wv.bias"]
    expected = v @ params["block0.attn.wo.weight"] + params["block0.attn.wo.bias"]
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_identical_tokens_give_uniform_attention():
    token = rng.normal(size=32)
    win = np.tile(token, (16, 1))
    out = swin.window_attention(win, PARAMS, CFG, block=0)
    # with uniform weights every output row equals the single-token result
    np.testing.assert_allclose(out, np.tile(out[0], (16, 1)), atol=1e-12)


def test_window_attention_matches_double_loop_oracle():
    win = rng.normal(size=(16, 32))
    out = swin.window_attention(win, PARAMS, CFG, block=0)
    d, h = 32, 2
    dh = d // h
    q = win @ PARAMS["block0.attn.wq.weight"] + PARAMS["block0.attn.wq.bias"]
    k = win @ PARAMS["block0.attn.wk.weight"] + PARAMS["block0.attn.wk.bias"]
    v = win @ PARAMS["block0.attn.wv.weight"] + PARAMS["block0.attn.wv.bias"]
    expected = np.zeros((16, d))
    for head in range(h):
        sl = slice(head * dh, (head + 1) * dh)
        for i in range(16):
            logits = np.array([q[i, sl] @ k[j, sl] for j in range(16)]) / np.sqrt(dh)
            w = np.exp(logits - logits.max())
            w /= w.sum()
            assert abs(w.sum() - 1.0) < 1e-12
            expected[i, sl] = sum(w[j] * v[j, sl] for j in range(16))
    expected = expected @ PARAMS["block0.attn.wo.weight"] + PARAMS["block0.attn.wo.bias"]
    np.testing.assert_allclose(out, expected, atol=1e-10)


# -- full forward -----------------------------------------------------------------


def test_forward_output_shape():
    assert swin.forward(np.zeros((32, 32)), PARAMS, CFG).shape == (18,)
    assert swin.forward(rng.normal(size=(3, 32, 32, 1)), PARAMS, CFG).shape == (3, 18)


def test_forward_matches_reference():
    image = rng.normal(size=(32, 32))
    got = swin.forward(image, PARAMS, CFG)
    expected = ref_forward(image, PARAMS, CFG)
    np.testing.assert_allclose(got, expected, rtol=1e-10, atol=1e-10)


def test_forward_deterministic():
    image = rng.normal(size=(32, 32))
    a = swin.forward(image, PARAMS, CFG)
    b = swin.forward(image, swin.init_params(CFG), CFG)
    np.testing.assert_array_equal(a, b)  # same seed -> bitwise identical


def test_window_permutation_equivariance():
    # permuting tokens inside one window before an unshifted block and
    # unpermuting after leaves the block output unchanged (no positional bias)
    from aucues.autodiff import Tensor
    from aucues.swin import _attend

    x = rng.normal(size=(1, 4, 16, 32))
    perm = rng.permutation(16)
    tensors = {k: Tensor(v) for k, v in PARAMS.items()}
    base = _attend(Tensor(x), tensors, CFG, block=0).data
    xp = x.copy()
    xp[0, 2] = xp[0, 2][perm]
    permuted = _attend(Tensor(xp), tensors, CFG, block=0).data
    unperm = permuted.copy()
    unperm[0, 2][perm] = permuted[0, 2]
    np.testing.assert_allclose(unperm, base, atol=1e-12)


def test_relative_bias_flag():
    cfg = ModelConfig(use_relative_bias=True)
    params = swin.init_params(cfg)
    assert params["block0.attn.rel_bias"].shape == (49, 2)
    out = swin.forward(rng.normal(size=(32, 32)), params, cfg)
    assert out.shape == (18,)
    # nonzero bias changes the output
    params["block0.attn.rel_bias"] += 1e-1 * rng.normal(size=(49, 2))
    out2 = swin.forward(rng.normal(size=(32, 32)), params, cfg)
    assert np.isfinite(out2).all()


# -- backward ----------------------------------------------------------------------


def test_backward_zero_upstream():
    grads = swin.backward(np.zeros((32, 32)), PARAMS, np.zeros(18), CFG)
    assert set(grads) == set(PARAMS)
    assert all((g == 0).all() for g in grads.values())


def test_backward_head_bias_is_upstream():
    upstream = rng.normal(size=18)
    grads = swin.backward(rng.normal(size=(32, 32)), PARAMS, upstream, CFG)
    np.testing.assert_allclose(grads["head.bias"], upstream, atol=1e-15)


def test_backward_rejects_bad_upstream_shape():
    with pytest.raises(ShapeError):
        swin.backward(np.zeros((32, 32)), PARAMS, np.zeros((2, 18)), CFG)


def test_backward_matches_finite_differences_sample():
    # spot check; the exhaustive sweep runs in the acceptance suite
    image = rng.normal(size=(32, 32))
    labels = rng.integers(0, 2, (1, 18))
    labels[0, 4] = -1
    mask = (labels != -1).astype(int)

    def loss_of(p):
        return masked_bce(swin.forward(image[None, :, :, None], p, CFG),
                          labels, mask).value

    logits = swin.forward(image[None, :, :, None], PARAMS, CFG)
    grads = swin.backward(image[None, :, :, None], PARAMS,
                          masked_bce_grad(logits, labels, mask), CFG)
    check_rng = np.random.default_rng(5)
    for key in ("patch.weight", "block0.attn.wk.weight", "block1.mlp.fc1.weight",
                "block1.ln1.scale", "head.weight"):
        flat_idx = check_rng.choice(PARAMS[key].size, 4, replace=False)
        for i in flat_idx:
            p2 = {k: v.copy() for k, v in PARAMS.items()}
            p2[key].ravel()[i] += 1e-5
            up = loss_of(p2)
            p2[key].ravel()[i] -= 2e-5
            down = loss_of(p2)
            fd = (up - down) / 2e-5
            an = grads[key].ravel()[i]
            assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-7)


# -- config and checkpoints ----------------------------------------------------------


def test_config_validation():
    with pytest.raises(ShapeError):
        ModelConfig(image_size=30)
    with pytest.raises(ShapeError):
        ModelConfig(embed_dim=33)
    with pytest.raises(ShapeError):
        ModelConfig(window=3)
    with pytest.raises(ShapeError):
        ModelConfig(channels=2)


def test_checkpoint_roundtrip_bitwise(tmp_path):
    path = tmp_path / "model.npz"
    swin.save_checkpoint(path, PARAMS, CFG)
    loaded, cfg = swin.load_checkpoint(path)
    assert cfg == CFG
    assert set(loaded) == set(PARAMS)
    for k in PARAMS:
        np.testing.assert_array_equal(loaded[k], PARAMS[k])
