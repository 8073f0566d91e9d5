import numpy as np
import pytest

from morel.deform import DeformationField
from morel.errors import CorruptRecord, LedgerViolation, NotFound
from morel.scene import ANCHOR_ARRAYS, derive_keyframe_space, init_anchor_space
from morel.store import AnchorStore, ResidencyLedger, decode_bundle, encode_bundle, fnv1a64

from oracles import fnv1a64 as fnv_oracle


def _random_bundle(seed):
    rng = np.random.default_rng(seed)
    glob = init_anchor_space(rng.uniform(0, 50, (int(rng.integers(5, 80)), 2)), 5.0, seed=seed,
                             feature_dim=int(rng.integers(2, 9)), n_offsets=int(rng.integers(1, 5)),
                             hidden=int(rng.integers(2, 9)))
    glob.level[:] = rng.integers(0, 3, len(glob))
    space = derive_keyframe_space(glob, int(rng.integers(0, 6)), 40)
    for name in ANCHOR_ARRAYS:
        arr = getattr(space, name)
        if arr.dtype == np.float64:
            arr[:] = rng.normal(size=arr.shape)
    fld = None
    if rng.uniform() < 0.7:
        fld = DeformationField.init((0, 0, 50, 50), space.n_offsets, rng, resolution=int(rng.integers(2, 6)))
        for arr in fld.params().values():
            arr[:] = rng.normal(size=arr.shape)
    return space, fld


def _assert_same(a, b):
    for name in ANCHOR_ARRAYS:
        x, y = getattr(a.space, name), getattr(b.space, name)
        assert x.dtype == y.dtype and x.shape == y.shape and x.tobytes() == y.tobytes(), name
    for name, arr in a.space.decoder.params().items():
        assert arr.tobytes() == b.space.decoder.params()[name].tobytes()
    assert (a.field is None) == (b.field is None)
    if a.field is not None:
        for name, arr in a.field.params().items():
            assert arr.tobytes() == b.field.params()[name].tobytes()
    assert (a.space.kind, a.space.n, a.space.t_n) == (b.space.kind, b.space.n, b.space.t_n)


def test_checksum_matches_reference():
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    blob = np.random.default_rng(0).integers(0, 256, 5000, dtype=np.uint8).tobytes()
    assert fnv1a64(blob) == fnv_oracle(blob)


def test_seed3_roundtrip_through_disk(tmp_path):
    space, fld = _random_bundle(3)
    st = AnchorStore(tmp_path)
    st.save(2, space, fld)
    loaded = st.load(2)
    from morel.store import Bundle
    _assert_same(Bundle(space, fld), loaded)


def test_hundred_roundtrips_are_bit_exact():
    from morel.store import Bundle
    for seed in range(100):
        space, fld = _random_bundle(seed)
        data = encode_bundle(space, fld)
        back = decode_bundle(data)
        _assert_same(Bundle(space, fld), back)
        assert encode_bundle(back.space, back.field) == data


def test_hundred_corruptions_are_detected():
    rng = np.random.default_rng(7)
    space, fld = _random_bundle(1)
    data = encode_bundle(space, fld)
    for _ in range(100):
        buf = bytearray(data)
        i = int(rng.integers(0, len(buf)))
        buf[i] ^= int(rng.integers(1, 256))
        with pytest.raises(CorruptRecord):
            decode_bundle(bytes(buf))


def test_truncated_record_is_corrupt():
    data = encode_bundle(*_random_bundle(2))
    with pytest.raises(CorruptRecord):
        decode_bundle(data[:10])


def test_save_load_save_is_byte_identical(tmp_path):
    st = AnchorStore(tmp_path)
    st.save(0, *_random_bundle(4))
    first = st.path(0).read_bytes()
    b = st.load(0)
    st.save(0, b.space, b.field)
    assert st.path(0).read_bytes() == first


def test_file_names(tmp_path):
    st = AnchorStore(tmp_path)
    assert st.path("global").name == "gca.morl"
    assert st.path(3).name == "kfa_0003.morl"


def test_missing_record(tmp_path):
    with pytest.raises(NotFound):
        AnchorStore(tmp_path).load(5)


def test_ledger_rules(tmp_path):
    st = AnchorStore(tmp_path)
    rep = st.residency_report()
    assert not rep.resident
    assert rep.peak_key == 0
    with pytest.raises(LedgerViolation):
        st.unload(1)
    st.save(1, *_random_bundle(5))
    st.load(1)
    with pytest.raises(LedgerViolation):
        st.load(1)
    st.unload(1)
    with pytest.raises(LedgerViolation):
        st.unload(1)
    actions = [(e.key, e.action) for e in st.residency_report().events]
    assert actions == [(1, "load"), (1, "unload")]


def test_ledger_separates_global_from_keys():
    led = ResidencyLedger()
    led.enter("global")
    led.enter(0)
    led.enter(1)
    assert led.key_count == 2 and led.peak_key == 2 and led.peak_global == 1
    led.leave(0)
    led.leave(1)
    assert led.peak_key == 2 and led.key_count == 0
