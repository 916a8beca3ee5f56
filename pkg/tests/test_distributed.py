import pytest
import torch

from flava.distributed import (
    WorkerShard,
    full_batch_reference,
    global_contrastive,
    local_contrastive,
    max_relative_error,
    shard_batch,
    verify,
)
from flava.objectives import contrastive_loss


def embeddings(batch=32, dim=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(batch, dim, generator=g, dtype=torch.float64), torch.randn(batch, dim, generator=g, dtype=torch.float64)


def test_single_worker_equals_plain_loss():
    img, txt = embeddings(8)
    out = global_contrastive(shard_batch(img, txt, 1), 0.07)
    ref_loss, gi, gt = full_batch_reference(img, txt, 0.07)
    assert abs(float(out.loss) - float(ref_loss)) < 1e-12
    assert max_relative_error(out.image_grad(), gi) < 1e-12
    loc = local_contrastive(shard_batch(img, txt, 1), 0.07)
    assert torch.equal(loc.image_grad(), out.image_grad())
    assert torch.equal(loc.text_grad(), out.text_grad())


def test_four_workers_match_full_batch():
    img, txt = embeddings(32)
    ref_loss, gi, gt = full_batch_reference(img, txt, 0.07)
    out = global_contrastive(shard_batch(img, txt, 4), 0.07)
    assert abs(float(out.loss) - float(ref_loss)) < 1e-10
    assert max_relative_error(out.image_grad(), gi) < 1e-6
    assert max_relative_error(out.text_grad(), gt) < 1e-6


def test_local_variant_differs_but_forward_agrees():
    img, txt = embeddings(32)
    shards = shard_batch(img, txt, 4)
    glob, loc = global_contrastive(shards, 0.07), local_contrastive(shards, 0.07)
    assert abs(float(glob.loss) - float(loc.loss)) < 1e-10
    assert float((glob.image_grad() - loc.image_grad()).norm()) > 0
    for a, b in zip(glob.worker_losses, loc.worker_losses):
        assert float(a) == float(b)


def test_local_variant_equals_own_rows_only():
    # oracle: worker k's local gradient is the gradient of its own loss terms
    # w.r.t. its own shard, with everything else frozen
    img, txt = embeddings(8, 4, seed=3)
    loc = local_contrastive(shard_batch(img, txt, 2), 0.5)
    i = img.clone().requires_grad_(True)
    t = txt.clone().requires_grad_(True)
    _, logits = contrastive_loss(i, t, 0.5)
    rows = torch.arange(4)
    own = 0.5 * (
        torch.nn.functional.cross_entropy(logits[rows], rows, reduction="sum")
        + torch.nn.functional.cross_entropy(logits.T[rows], rows, reduction="sum")
    ) / 8
    gi, gt = torch.autograd.grad(own, (i, t))
    assert torch.allclose(loc.image_grads[0], gi[:4], atol=1e-12)
    assert torch.allclose(loc.text_grads[0], gt[:4], atol=1e-12)


@pytest.mark.parametrize("k", [1, 2, 4, 8, 16])
def test_global_result_independent_of_worker_count(k):
    img, txt = embeddings(16, seed=1)
    base = global_contrastive(shard_batch(img, txt, 1), 0.1)
    out = global_contrastive(shard_batch(img, txt, k), 0.1)
    assert max_relative_error(out.image_grad(), base.image_grad()) < 1e-6
    assert abs(float(out.loss) - float(base.loss)) < 1e-10


def test_permuting_shards_permutes_gradients():
    img, txt = embeddings(16, seed=2)
    shards = shard_batch(img, txt, 4)
    order = [2, 0, 3, 1]
    permuted = [WorkerShard(new, shards[old].image_emb, shards[old].text_emb) for new, old in enumerate(order)]
    a = global_contrastive(shards, 0.1)
    b = global_contrastive(permuted, 0.1)
    for new, old in enumerate(order):
        assert torch.allclose(b.image_grads[new], a.image_grads[old], atol=1e-12)
        assert torch.allclose(b.text_grads[new], a.text_grads[old], atol=1e-12)


def test_shared_projection_gradient_sums_over_workers():
    g = torch.Generator().manual_seed(4)
    feats_i = torch.randn(16, 10, generator=g, dtype=torch.float64)
    feats_t = torch.randn(16, 10, generator=g, dtype=torch.float64)
    w_i = torch.randn(10, 6, generator=g, dtype=torch.float64, requires_grad=True)
    w_t = torch.randn(10, 6, generator=g, dtype=torch.float64, requires_grad=True)
    loss, _ = contrastive_loss(feats_i @ w_i, feats_t @ w_t, 0.2)
    ref_i, ref_t = torch.autograd.grad(loss, (w_i, w_t))

    with torch.no_grad():
        shards = shard_batch(feats_i @ w_i, feats_t @ w_t, 4)
    out = global_contrastive(shards, 0.2)
    sum_i = sum(feats_i[4 * k : 4 * (k + 1)].T @ out.image_grads[k] for k in range(4))
    sum_t = sum(feats_t[4 * k : 4 * (k + 1)].T @ out.text_grads[k] for k in range(4))
    assert max_relative_error(sum_i, ref_i) < 1e-6
    assert max_relative_error(sum_t, ref_t) < 1e-6


def test_parallel_execution_is_identical():
    img, txt = embeddings(32, seed=5)
    shards = shard_batch(img, txt, 4)
    for fn in (global_contrastive, local_contrastive):
        a, b = fn(shards, 0.07), fn(shards, 0.07, parallel=True)
        assert torch.equal(a.image_grad(), b.image_grad())
        assert torch.equal(a.text_grad(), b.text_grad())
        assert torch.equal(a.loss, b.loss)


def test_shape_errors():
    img, txt = embeddings(10)
    with pytest.raises(ValueError, match="divisible"):
        shard_batch(img, txt, 4)
    ragged = [WorkerShard(0, img[:4], txt[:4]), WorkerShard(1, img[4:], txt[4:])]
    with pytest.raises(ValueError, match="ragged"):
        global_contrastive(ragged, 0.1)


def test_verify_report():
    report = verify(4, 32)
    assert report["global_pass"] and report["local_pass"]
    assert report["global_max_rel_grad_error"] < 1e-6
    assert report["local_vs_global_grad_norm"] > 0
    single = verify(1, 8)
    assert single["global_pass"] and single["local_pass"]
