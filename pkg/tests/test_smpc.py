import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedmesh.smpc import (
    DecryptionError,
    EncryptedMask,
    FixedPointError,
    FixedPointVector,
    MaskedShare,
    SmpcError,
    aggregate,
    decode_fixed,
    decrypt,
    encode_fixed,
    encrypt,
    exchange_keys,
    keygen,
    mask_model,
    sum_received_masks,
)


class ScriptedRng:
    """Hands out predetermined mask values in order."""

    def __init__(self, values):
        self.values = list(values)

    def integers(self, low, high, size, dtype):
        out = np.array([self.values.pop(0) for _ in range(size)], dtype=np.uint64)
        return out


def test_fixed_point_definition_and_wrap():
    assert encode_fixed(1.0).values[0] == 16777216
    assert int(encode_fixed(-1.0).values[0]) == 2**64 - 16777216


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=20))
def test_decode_within_resolution(xs):
    x = np.array(xs)
    assert np.all(np.abs(decode_fixed(encode_fixed(x)) - x) <= 2.0**-24)


def test_out_of_range_and_nonfinite():
    with pytest.raises(FixedPointError):
        encode_fixed([2.0**40])
    with pytest.raises(FixedPointError):
        encode_fixed([np.nan])


def test_encrypt_round_trip_and_wrong_key():
    a, b = keygen(), keygen()
    blob = encrypt(b.public, b"mask bytes", b"aad")
    assert decrypt(b.private, blob, b"aad") == b"mask bytes"
    with pytest.raises(DecryptionError):
        decrypt(a.private, blob, b"aad")
    with pytest.raises(DecryptionError):
        decrypt(b.private, blob, b"other aad")


def test_exchange_keys_two_members():
    keys = {m: keygen() for m in ("c", "p")}
    directory = exchange_keys({m: k.public for m, k in keys.items()}, ["c", "p"])
    peers_of_p = {m: k for m, k in directory.items() if m != "p"}
    assert list(peers_of_p) == ["c"]
    with pytest.raises(SmpcError):
        exchange_keys({"c": keys["c"].public}, ["c", "p"])


def test_zero_masks_leave_model_unchanged():
    b = keygen()
    model = encode_fixed([1.5, -2.25, 3.0])
    share, masks = mask_model(model, "a", [("b", b.public)], ScriptedRng([0, 0, 0]))
    assert share.data == model
    assert len(masks) == 1


def test_seven_minus_two_minus_five_is_zero():
    b, c = keygen(), keygen()
    model = FixedPointVector(np.array([7], dtype=np.uint64))
    share, masks = mask_model(model, "a", [("b", b.public), ("c", c.public)], ScriptedRng([2, 5]), n_participants=3)
    assert int(share.data.values[0]) == 0
    assert len(masks) == 2
    got_b = sum_received_masks([m for m in masks if m.destination == "b"], b.private, "b", 1)
    got_c = sum_received_masks([m for m in masks if m.destination == "c"], c.private, "c", 1)
    assert int(got_b.values[0]) == 2 and int(got_c.values[0]) == 5


def test_mask_count_is_n_minus_one():
    keys = {f"c{i}": keygen() for i in range(6)}
    peers = [(k, v.public) for k, v in keys.items() if k != "c0"]
    _, masks = mask_model(encode_fixed([1.0]), "c0", peers, np.random.default_rng(0), n_participants=6)
    assert len(masks) == 5
    with pytest.raises(SmpcError):
        mask_model(encode_fixed([1.0]), "c0", peers[:2], np.random.default_rng(0), n_participants=6)


def test_sum_wraps_modulo():
    me = keygen()
    _, m1 = mask_model(FixedPointVector([0]), "x", [("me", me.public)], ScriptedRng([3]))
    _, m2 = mask_model(FixedPointVector([0]), "y", [("me", me.public)], ScriptedRng([2**64 - 1]))
    assert int(sum_received_masks(m1 + m2, me.private, "me", 1).values[0]) == 2


def test_single_mask_sum_is_that_mask():
    me = keygen()
    _, m = mask_model(FixedPointVector([0, 0]), "x", [("me", me.public)], ScriptedRng([11, 13]))
    assert sum_received_masks(m, me.private, "me", 2).values.tolist() == [11, 13]


def test_tampered_ciphertext_aborts():
    me = keygen()
    _, (m,) = mask_model(encode_fixed([1.0]), "x", [("me", me.public)], np.random.default_rng(1))
    bad = bytearray(m.ciphertext)
    bad[-1] ^= 1
    with pytest.raises(DecryptionError):
        sum_received_masks([EncryptedMask(m.origin, m.destination, bytes(bad))], me.private, "me", 1)
    # replaying the mask under another round label also fails
    with pytest.raises(DecryptionError):
        sum_received_masks([m], me.private, "me", 1, round_=1)


def run_protocol(models, rng, round_=0):
    ids = [f"c{i}" for i in range(len(models))]
    keys = {i: keygen() for i in ids}
    shares, all_masks = [], []
    for cid, m in zip(ids, models):
        peers = [(p, keys[p].public) for p in ids if p != cid]
        share, masks = mask_model(encode_fixed(m), cid, peers, rng, round_, len(ids))
        shares.append(share)
        all_masks += masks
    sums = [
        sum_received_masks([m for m in all_masks if m.destination == cid], keys[cid].private, cid, len(models[0]), round_)
        for cid in ids
    ]
    return decode_fixed(aggregate(shares, sums)), all_masks


def test_single_client_aggregate_is_model():
    out, masks = run_protocol([np.array([1.25, -3.0])], np.random.default_rng(0))
    assert masks == []
    np.testing.assert_array_equal(out, [1.25, -3.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32))
def test_two_models_three_and_five_sum_to_eight(seed):
    out, _ = run_protocol([np.array([3.0]), np.array([5.0])], np.random.default_rng(seed))
    assert out[0] == 8.0


def test_missing_mask_sum_aborts():
    share = MaskedShare("a", encode_fixed([1.0]))
    with pytest.raises(SmpcError):
        aggregate([share, share], [encode_fixed([0.0])])
    with pytest.raises(SmpcError):
        aggregate([], [])
