import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from scaf.discriminator import (BankConfig, BankError, ManipulatedDiscriminator, PatchBank,
                                SemanticBank, build_patch_bank, build_semantic_bank,
                                fuse_neighborhood, load_bank, minmax_normalize, purify, save_bank,
                                score, suppress)
from scaf.fixture import make_authentic, make_samples
from scaf.trainer import to_tensor_images

WIDTHS = (32, 64, 128, 256)


def _sem(*rows):
    return build_semantic_bank([torch.tensor(r, dtype=torch.float64) for r in rows])


# -- neighbourhood fusion ---------------------------------------------------

def test_fuse_constant_field():
    c = torch.rand(5, 1, 1).expand(5, 6, 7)
    w = torch.rand(3, 3, dtype=torch.float64)
    w = w / w.sum()
    torch.testing.assert_close(fuse_neighborhood(c.double(), w), c.double())


def test_fuse_single_position():
    p = torch.rand(4, 1, 1)
    torch.testing.assert_close(fuse_neighborhood(p), p)


def test_fuse_bruteforce():
    g = torch.rand(3, 4, 4, dtype=torch.float64)
    out = fuse_neighborhood(g)
    ref = torch.zeros_like(g)
    for y in range(4):
        for x in range(4):
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    yy, xx = min(max(y + dy, 0), 3), min(max(x + dx, 0), 3)
                    ref[:, y, x] += g[:, yy, xx] / 9
    torch.testing.assert_close(out, ref, rtol=0, atol=1e-12)


def test_fuse_bad_weights():
    with pytest.raises(ValueError, match="sum to 1"):
        fuse_neighborhood(torch.rand(2, 3, 3), torch.full((3, 3), 0.2))


# -- banks ----------------------------------------------------------------

def test_patch_bank_counting():
    assert len(build_patch_bank([torch.rand(8, 2, 2)])) == 4


def test_patch_bank_capacity_deterministic():
    feats = [torch.rand(3, 5, 5) for _ in range(4)]  # 100 candidates
    a = build_patch_bank(feats, capacity=10, rng_seed=7)
    b = build_patch_bank(feats, capacity=10, rng_seed=7)
    assert len(a) == 10
    assert torch.equal(a.entries, b.entries)


def test_patch_bank_union():
    feats = [torch.rand(4, 3, 5, dtype=torch.float64) for _ in range(3)]
    bank = build_patch_bank(feats)
    rows = []
    for f in feats:
        fused = fuse_neighborhood(f)
        for y in range(3):
            for x in range(5):
                rows.append(fused[:, y, x])
    torch.testing.assert_close(bank.entries, torch.stack(rows), rtol=0, atol=0)


def test_patch_bank_errors():
    with pytest.raises(BankError):
        build_patch_bank([])
    with pytest.raises(BankError):
        PatchBank(torch.tensor([[1.0, float("nan")]]))


def test_semantic_bank_examples():
    v = torch.zeros(256, dtype=torch.float64)
    v[0], v[1] = 3, 4
    e = build_semantic_bank([v]).entries[0]
    assert e[0].item() == pytest.approx(0.6, abs=1e-15) and e[1].item() == pytest.approx(0.8, abs=1e-15)
    u = torch.zeros(256, dtype=torch.float64)
    u[5] = 1
    assert torch.equal(build_semantic_bank([u]).entries[0], u)


def test_semantic_bank_norms():
    torch.manual_seed(0)
    bank = build_semantic_bank(list(torch.randn(20, 256)))
    for row in bank.entries:
        assert abs(math.sqrt(sum(float(x) ** 2 for x in row)) - 1) <= 1e-6


def test_semantic_bank_zero():
    with pytest.raises(BankError, match="sample 1"):
        build_semantic_bank([torch.ones(4), torch.zeros(4)])


def test_bank_file_roundtrip(tmp_path):
    e = torch.rand(13, 7)
    save_bank(tmp_path / "b.bin", e)
    assert torch.equal(load_bank(tmp_path / "b.bin"), e)
    raw = (tmp_path / "b.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"NOTABANK" + raw[8:])
    with pytest.raises(BankError):
        load_bank(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes(raw[:-4])
    with pytest.raises(BankError):
        load_bank(tmp_path / "short.bin")


# -- suppression and scoring -----------------------------------------------

def test_suppress_examples():
    q = torch.tensor([1.0, 0.0], dtype=torch.float64)
    assert torch.equal(suppress(q, _sem([1.0, 0.0])), torch.zeros(2, dtype=torch.float64))
    assert torch.equal(suppress(q, _sem([0.0, 1.0])), q)
    out = suppress(torch.tensor([1.0, 1.0], dtype=torch.float64), _sem([1.0, 0.0]))
    torch.testing.assert_close(out, torch.full((2,), 1 - 1 / math.sqrt(2), dtype=torch.float64))
    assert out[0].item() == pytest.approx(0.29289, abs=1e-5)


def test_suppress_zero_query():
    z = torch.zeros(3)
    assert torch.equal(suppress(z, _sem([1.0, 0.0, 0.0]).__class__(torch.eye(3)[:1])), z)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_suppress_shrinks_nonnegative(seed):
    g = torch.Generator().manual_seed(seed)
    q = torch.rand(16, 8, generator=g, dtype=torch.float64)
    bank = build_semantic_bank(list(torch.rand(5, 8, generator=g, dtype=torch.float64) + 1e-3))
    out = suppress(q, bank)
    assert (out.norm(dim=1) <= q.norm(dim=1) + 1e-12).all()


def test_score_examples():
    bank = PatchBank(torch.tensor([[0.0, 0.0]], dtype=torch.float64))
    assert score(torch.tensor([3.0, 4.0], dtype=torch.float64), bank).item() == 5.0
    entries = torch.rand(30, 6)
    assert score(entries[17], PatchBank(entries)).item() == 0.0


def test_score_linear_scan():
    torch.manual_seed(0)
    entries = torch.randn(50, 16)
    queries = torch.randn(100, 16)
    out = score(queries, PatchBank(entries))
    for i in range(100):
        best = min(((queries[i] - e) ** 2).sum().sqrt() for e in entries)
        assert out[i].item() == best.item()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), m=st.integers(1, 40))
def test_score_lower_bound(seed, m):
    g = torch.Generator().manual_seed(seed)
    entries = torch.randn(m, 5, generator=g, dtype=torch.float64)
    q = torch.randn(5, generator=g, dtype=torch.float64)
    s = score(q, PatchBank(entries)).item()
    assert s >= 0
    for e in entries:
        assert s <= (q - e).norm().item() + 1e-12


# -- purification ----------------------------------------------------------

def test_purify_examples():
    g = torch.Generator().manual_seed(0)
    mp = torch.rand(12, 12, generator=g)
    assert torch.equal(purify(mp, torch.zeros(12, 12)), torch.zeros(12, 12))
    ap = torch.rand(12, 12, generator=g)
    assert torch.equal(purify(torch.zeros(12, 12), ap), ap)


def test_purify_block():
    mp = torch.zeros(16, 16)
    mp[4:10, 5:11] = 1
    ap = mp.clone()
    ap[12:, 12:] = 0.4
    out = purify(mp, ap)
    assert (out[4:10, 5:11] == 0).all()
    expected = ap.clone()
    expected[4:10, 5:11] = 0
    assert torch.equal(out, expected)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_purify_never_increases(seed):
    g = torch.Generator().manual_seed(seed)
    mp, ap = torch.rand(2, 10, 10, generator=g)
    assert (purify(mp, ap) <= ap).all()


def test_minmax_constant_zero():
    assert torch.equal(minmax_normalize(torch.full((1, 4, 4), 3.0)), torch.zeros(1, 4, 4))


# -- full discriminator -----------------------------------------------------

@pytest.fixture(scope="module")
def toy_md():
    auth = to_tensor_images(make_authentic(6, 0, size=64))
    manip = to_tensor_images([s.image for s in make_samples(4, 0, size=64)])
    return ManipulatedDiscriminator.from_seed(WIDTHS, 0).build(auth, manip), auth, manip


def test_bank_member_scores_zero(toy_md):
    md, auth, _ = toy_md
    raw = md.raw_scores(auth, md.authentic)
    assert raw.abs().max().item() == 0.0
    single = md.raw_scores(auth[2:3], md.authentic)
    assert single.abs().max().item() <= 1e-6


def test_prior_shapes_and_range(toy_md):
    md, _, manip = toy_md
    pp = md.prior_map(manip)
    assert pp.mp.shape == pp.ap.shape == (4, 1, 8, 8)
    for m in (pp.mp, pp.ap):
        assert m.min() >= 0 and m.max() <= 1


def test_prior_invariant_to_entry_order(toy_md):
    md, _, manip = toy_md
    before = md.prior_map(manip)
    state = md.bank_state()
    g = torch.Generator().manual_seed(3)
    shuffled = {k: v[torch.randperm(len(v), generator=g)] for k, v in state.items()}
    md2 = ManipulatedDiscriminator.from_seed(WIDTHS, 0)
    md2.load_bank_state(shuffled)
    after = md2.prior_map(manip)
    assert torch.equal(before.mp, after.mp)
    assert torch.equal(before.ap, after.ap)


def test_prior_without_manipulated_bank():
    auth = to_tensor_images(make_authentic(3, 0, size=64))
    md = ManipulatedDiscriminator.from_seed(WIDTHS, 0).build(auth)
    pp = md.prior_map(auth[:1])
    torch.testing.assert_close(pp.ap, 1 - pp.mp)


def test_prior_requires_banks():
    with pytest.raises(BankError):
        ManipulatedDiscriminator.from_seed(WIDTHS, 0).prior_map(torch.rand(1, 3, 64, 64))


def test_save_load(toy_md, tmp_path):
    md, _, manip = toy_md
    md.save(tmp_path)
    back = ManipulatedDiscriminator.load(tmp_path)
    assert torch.equal(md.prior_map(manip).mp, back.prior_map(manip).mp)


def test_separation_small():
    samples = make_samples(10, 5)
    auth = to_tensor_images(make_authentic(20, 5))
    md = ManipulatedDiscriminator.from_seed(WIDTHS, 0).build(auth)
    mp = torch.nn.functional.interpolate(md.prior_map(to_tensor_images([s.image for s in samples])).mp,
                                         size=(128, 128), mode="bilinear", align_corners=False)
    wins = sum(float(mp[i, 0][torch.from_numpy(s.dense_mask)].mean()) >
               float(mp[i, 0][torch.from_numpy(~s.dense_mask)].mean()) for i, s in enumerate(samples))
    assert wins >= 8


def test_frozen():
    md = ManipulatedDiscriminator.from_seed(WIDTHS, 0)
    md.train()
    assert not md.training
    assert not any(p.requires_grad for p in md.parameters())
