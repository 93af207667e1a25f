import numpy as np
import pytest

from peftcl import tensor as T
from peftcl.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from peftcl.peft import AdapterSet, adapted_features, init_lora, init_prompt
from peftcl.tensor import ShapeError, Tape, Tensor, backward
from peftcl.train import TrainConfig, fit
from peftcl.vit import (ConfigError, Head, ViTConfig, attention, classify, count_trainable_params,
                        init_head, init_vit, params_from_named, patchify_embed, vit_forward)


def test_sequence_length_formula():
    cfg = ViTConfig(8, 8, 3, 4, 8, 1, 2, 16, 3)
    assert cfg.seq_len == 5
    assert ViTConfig().seq_len == 17


@pytest.mark.parametrize("kw", [dict(image_height=10), dict(hidden_dim=10, num_heads=4)])
def test_invalid_config(kw):
    base = dict(image_height=8, image_width=8, channels=3, patch_size=4, hidden_dim=8, num_layers=1,
                num_heads=2, ffn_dim=16, num_classes=3)
    with pytest.raises(ConfigError):
        ViTConfig(**{**base, **kw})


def test_patchify_embed_zero_image(tiny_cfg):
    params = init_vit(tiny_cfg, 0)
    params.pos_encoding.data[:] = 0.0
    x = patchify_embed(np.zeros((8, 8, 3)), tiny_cfg, params).data
    assert x.shape == (5, 8)
    assert np.array_equal(x[0], params.cls_token.data[0])
    assert not x[1:].any()


def test_patchify_embed_locality(tiny_cfg):
    params = init_vit(tiny_cfg, 0)
    img = np.random.default_rng(0).normal(size=(8, 8, 3))
    other = img.copy()
    other[4:, :4] += 1.0  # bottom-left patch, row-major index 2 -> sequence row 3
    a = patchify_embed(img, tiny_cfg, params).data
    b = patchify_embed(other, tiny_cfg, params).data
    changed = np.flatnonzero(np.abs(a - b).max(axis=1) > 0)
    assert changed.tolist() == [3]


def test_patchify_embed_shape_error(tiny_cfg):
    with pytest.raises(ShapeError):
        patchify_embed(np.zeros((8, 4, 3)), tiny_cfg, init_vit(tiny_cfg, 0))


@pytest.mark.parametrize("length", [1, 5, 9])
def test_forward_shape_any_length(tiny_cfg, length):
    params = init_vit(tiny_cfg, 0)
    x = Tensor(np.random.default_rng(length).normal(size=(length, 8)))
    assert vit_forward(x, params, tiny_cfg).shape == (8,)


def test_zero_query_key_gives_uniform_attention(tiny_cfg):
    params = init_vit(tiny_cfg, 0)
    blk = params.blocks[0]
    blk.w_q.data[:] = 0.0
    blk.w_k.data[:] = 0.0
    x = Tensor(np.random.default_rng(1).normal(size=(1, 6, 8)))
    _, weights = attention(x, blk, tiny_cfg, 0, return_weights=True)
    assert np.allclose(weights.data, 1.0 / 6.0, atol=1e-15)


def test_classify_cases():
    head = Head(Tensor(np.eye(2)), Tensor([0.5, -1.0]))
    assert classify(Tensor(np.zeros(2)), head).data.tolist() == [0.5, -1.0]
    assert classify(Tensor([2.0, 3.0]), head).data.tolist() == [2.5, 2.0]
    hand = Head(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([1.0, 1.0]))
    # W^T f + b with f = [1, 1]: [1+3, 2+4] + 1
    assert classify(Tensor([1.0, 1.0]), hand).data.tolist() == [5.0, 7.0]


def test_count_trainable_params_examples():
    cfg = ViTConfig(224, 224, 3, 16, 768, 12, 12, 3072, 100)
    head = 768 * 100 + 100
    assert count_trainable_params("prompt", cfg, prompt_length=10) == 7680 + head
    assert count_trainable_params("lora", cfg, rank=1) == 36_864 + head
    with pytest.raises(ConfigError):
        count_trainable_params("lora", cfg, rank=0)
    with pytest.raises(ConfigError):
        count_trainable_params("prompt", cfg, prompt_length=0)


@pytest.mark.parametrize("bare", [False, True])
def test_full_count_matches_parameters(bare):
    cfg = ViTConfig(8, 8, 3, 4, 8, 2, 2, 16, 3, bare_block=bare)
    params = init_vit(cfg, 0)
    actual = sum(t.size for t in params.named_tensors().values())
    assert count_trainable_params("full", cfg) == actual
    for r in (1, 2, 4):
        assert count_trainable_params("full", cfg) >= count_trainable_params("lora", cfg, rank=r)


def _loss(images, labels, cfg, params, payload=None):
    feats = adapted_features(images, params, cfg, payload)
    return T.cross_entropy_masked(classify(feats, params.head), labels)


@pytest.mark.parametrize("flags", [dict(), dict(bare_block=True),
                                   dict(halved_attention_scale=True, outer_gelu=True)])
def test_end_to_end_gradient(flags, images):
    cfg = ViTConfig(8, 8, 3, 4, 8, 2, 2, 16, 3, **flags)
    params = init_vit(cfg, 1)
    labels = np.array([0, 1, 2, 0, 1])
    named = params.named_tensors()
    rng = np.random.default_rng(0)
    with Tape() as tape:
        loss = _loss(images, labels, cfg, params)
    backward(loss, tape)
    for name in ("patch_embed", "blocks.0.w_q", "blocks.1.w_2", "cls_token", "head.w"):
        t = named[name]
        idx = rng.choice(t.size, size=min(6, t.size), replace=False)
        fd = T.finite_difference_gradient(lambda _: _loss(images, labels, cfg, params), t, h=1e-5,
                                          indices=idx)
        a, n = t.grad.reshape(-1)[idx], fd.reshape(-1)[idx]
        assert np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)) < 1e-4


def test_frozen_base_never_changes(tiny_cfg, tiny_base, images):
    before = {k: v.data.copy() for k, v in tiny_base.named_tensors().items()}
    lora = init_lora(2, ("q", "v"), 8, 2, 0)
    head = init_head(8, 3, 0)
    labels = np.array([0, 1, 2, 0, 1])

    def loss_fn(idx):
        logits = classify(adapted_features(images[idx], tiny_base, tiny_cfg, lora), head)
        return T.cross_entropy_masked(logits, labels[idx]), 0.0

    fit(lora.tensors() + head.tensors() + tiny_base.backbone_tensors(), loss_fn, 5,
        TrainConfig(epochs=3, lr=0.5, batch_size=2), 0)
    for k, v in tiny_base.named_tensors().items():
        assert np.array_equal(before[k], v.data), k
    assert any(np.abs(b.data).max() > 0 for _, b in lora.pairs.values())


def test_forward_deterministic(tiny_cfg, tiny_base, images):
    x1 = vit_forward(patchify_embed(images, tiny_cfg, tiny_base), tiny_base, tiny_cfg).data
    x2 = vit_forward(patchify_embed(images, tiny_cfg, tiny_base), tiny_base, tiny_cfg).data
    assert np.array_equal(x1, x2)


def test_batch_matches_single(tiny_cfg, tiny_base, images):
    batch = vit_forward(patchify_embed(images, tiny_cfg, tiny_base), tiny_base, tiny_cfg).data
    single = vit_forward(patchify_embed(images[2], tiny_cfg, tiny_base), tiny_base, tiny_cfg).data
    assert np.allclose(batch[2], single, atol=1e-12)


def test_checkpoint_round_trip_bitwise(tmp_path, tiny_cfg):
    params = init_vit(tiny_cfg, 3)
    save_checkpoint(tmp_path / "ck", params.named_tensors(), {"num_layers": 2, "note": "x"})
    named, meta = load_checkpoint(tmp_path / "ck")
    assert meta == {"num_layers": 2, "note": "x"}
    for k, v in params.named_tensors().items():
        assert named[k].tobytes() == v.data.tobytes()
    clone = params_from_named({k: Tensor(v) for k, v in named.items()}, 2)
    assert set(clone.named_tensors()) == set(params.named_tensors())
    manifest = (tmp_path / "ck" / "manifest").read_text().splitlines()
    assert manifest[0] == "format peftcl-checkpoint 1"
    assert any(line.startswith("tensor patch_embed 48,8 f64le 0") for line in manifest)


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")
    save_checkpoint(tmp_path / "ck", {"a": np.ones(4)})
    (tmp_path / "ck" / "payload.bin").write_bytes(b"\0" * 8)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck")


def test_adapter_set_kind_checked():
    with pytest.raises(ConfigError):
        AdapterSet("lora", init_prompt(2, 8, 0))
