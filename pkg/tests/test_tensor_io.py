import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from htdecay.tensor_io import (
    MAGIC,
    BadMagicError,
    DuplicateNameError,
    ModuleId,
    ModuleKind,
    NonFiniteValuesError,
    OverlappingRegionsError,
    TruncatedPayloadError,
    UnsupportedDtypeError,
    WeightMatrix,
    format_module_name,
    parse_module_name,
    read_checkpoint,
    write_checkpoint,
)


def wm(name, arr):
    return WeightMatrix(id=parse_module_name(name), values=np.asarray(arr, dtype=np.float32))


class TestParseModuleName:
    @pytest.mark.parametrize(
        "raw,layer,kind",
        [
            ("layers.3.att.k", 3, ModuleKind.ATT_K),
            ("layers.11.mlp.down", 11, ModuleKind.MLP_DOWN),
            ("layers.0.att.q", 0, ModuleKind.ATT_Q),
            ("layers.7.mlp.gate", 7, ModuleKind.MLP_GATE),
        ],
    )
    def test_grammar_cases(self, raw, layer, kind):
        mid = parse_module_name(raw)
        assert mid == ModuleId(layer=layer, kind=kind, raw_name=raw)

    @pytest.mark.parametrize("raw", ["lm_head", "embed.tokens", "layers.2.norm.att", "", "layers.x.att.q"])
    def test_catch_all(self, raw):
        mid = parse_module_name(raw)
        assert mid.kind is ModuleKind.OTHER
        assert mid.raw_name == raw
        assert mid.layer == 0

    def test_parse_format_idempotent(self):
        for raw in ["layers.5.mlp.up", "lm_head", "layers.0.att.o", "whatever.1.2.3"]:
            mid = parse_module_name(raw)
            assert parse_module_name(format_module_name(mid)) == mid


class TestRoundTrip:
    def test_single_matrix_identity(self, tmp_path):
        path = tmp_path / "one.ckpt"
        entry = wm("layers.0.att.q", [[1.0, 2.0], [3.0, 4.0]])
        write_checkpoint([entry], {}, path)
        ckpt = read_checkpoint(path)
        assert len(ckpt.entries) == 1
        got = ckpt.entries[0]
        assert got.id == entry.id
        np.testing.assert_array_equal(got.values, entry.values)

    def test_empty_entry_list(self, tmp_path):
        path = tmp_path / "empty.ckpt"
        write_checkpoint([], {"note": "nothing"}, path)
        ckpt = read_checkpoint(path)
        assert ckpt.entries == []
        assert ckpt.metadata == {"note": "nothing"}

    def test_two_matrices_disjoint_regions(self, tmp_path):
        path = tmp_path / "two.ckpt"
        rng = np.random.default_rng(0)
        a = wm("layers.0.att.q", rng.standard_normal((4, 6)).astype(np.float32))
        b = wm("layers.0.mlp.up", rng.standard_normal((3, 5)).astype(np.float32))
        write_checkpoint([a, b], {}, path)

        raw = path.read_bytes()
        (mlen,) = struct.unpack_from("<I", raw, 8)
        manifest = json.loads(raw[12 : 12 + mlen])
        regions = sorted(
            (v["offset"], v["offset"] + v["length"]) for v in manifest.values()
        )
        for (s0, e0), (s1, e1) in zip(regions, regions[1:]):
            assert e0 <= s1

        ckpt = read_checkpoint(path)
        by_name = ckpt.by_name()
        np.testing.assert_array_equal(by_name["layers.0.att.q"].values, a.values)
        np.testing.assert_array_equal(by_name["layers.0.mlp.up"].values, b.values)

    @settings(max_examples=25, deadline=None)
    @given(
        shapes=st.lists(
            st.tuples(st.integers(1, 8), st.integers(1, 8)), min_size=1, max_size=5
        ),
        seed=st.integers(0, 2**32 - 1),
    )
    def test_round_trip_bit_exact(self, tmp_path_factory, shapes, seed):
        rng = np.random.default_rng(seed)
        entries = [
            wm(f"layers.{i}.att.q", rng.standard_normal(shape).astype(np.float32))
            for i, shape in enumerate(shapes)
        ]
        path = tmp_path_factory.mktemp("rt") / "x.ckpt"
        write_checkpoint(entries, {"k": "v"}, path)
        ckpt = read_checkpoint(path)
        assert len(ckpt.entries) == len(entries)
        for orig, got in zip(entries, ckpt.entries):
            assert got.id.raw_name == orig.id.raw_name
            assert got.values.tobytes() == orig.values.tobytes()

    def test_rewrite_is_byte_identical(self, tmp_path):
        rng = np.random.default_rng(7)
        entries = [wm("layers.0.att.v", rng.standard_normal((8, 8)).astype(np.float32))]
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        write_checkpoint(entries, {"m": "1"}, p1)
        write_checkpoint(entries, {"m": "1"}, p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestErrors:
    def test_duplicate_names(self, tmp_path):
        e = wm("layers.0.att.q", [[1.0]])
        with pytest.raises(DuplicateNameError):
            write_checkpoint([e, e], {}, tmp_path / "dup.ckpt")

    def test_non_finite_rejected(self):
        with pytest.raises(NonFiniteValuesError):
            wm("layers.0.att.q", [[np.nan]])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 10)
        with pytest.raises(BadMagicError):
            read_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "trunc.ckpt"
        manifest = json.dumps(
            {"layers.0.att.q": {"dtype": "f32", "shape": [2, 2], "offset": 0, "length": 16}}
        ).encode()
        path.write_bytes(MAGIC + struct.pack("<I", len(manifest)) + manifest + b"\x00" * 8)
        with pytest.raises(TruncatedPayloadError):
            read_checkpoint(path)

    def test_overlapping_regions(self, tmp_path):
        path = tmp_path / "olap.ckpt"
        manifest = json.dumps(
            {
                "a": {"dtype": "f32", "shape": [1, 2], "offset": 0, "length": 8},
                "b": {"dtype": "f32", "shape": [1, 2], "offset": 4, "length": 8},
            }
        ).encode()
        path.write_bytes(MAGIC + struct.pack("<I", len(manifest)) + manifest + b"\x00" * 12)
        with pytest.raises(OverlappingRegionsError):
            read_checkpoint(path)

    def test_unsupported_dtype(self, tmp_path):
        path = tmp_path / "f64.ckpt"
        manifest = json.dumps(
            {"a": {"dtype": "f64", "shape": [1, 1], "offset": 0, "length": 8}}
        ).encode()
        path.write_bytes(MAGIC + struct.pack("<I", len(manifest)) + manifest + b"\x00" * 8)
        with pytest.raises(UnsupportedDtypeError):
            read_checkpoint(path)

    def test_other_kind_preserved_on_read(self, tmp_path):
        path = tmp_path / "other.ckpt"
        write_checkpoint([wm("embed.tokens", [[0.5, 1.5]])], {}, path)
        ckpt = read_checkpoint(path)
        assert ckpt.entries[0].id.kind is ModuleKind.OTHER
        assert ckpt.entries[0].id.raw_name == "embed.tokens"
