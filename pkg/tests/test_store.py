"""Embedding table format, normalization, and synthetic generator tests."""
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptood.errors import (
    BadMagic,
    BadModality,
    BadVersion,
    DuplicateName,
    FormatError,
    NonFiniteValue,
    TrailingBytes,
    Truncated,
    ZeroVector,
)
from promptood.store import (
    EmbeddingRecord,
    EmbeddingTable,
    Modality,
    SynthSpec,
    l2_normalize,
    read_table,
    synth_dataset,
    write_table,
)


def roundtrip(table: EmbeddingTable) -> EmbeddingTable:
    buf = io.BytesIO()
    write_table(table, buf)
    buf.seek(0)
    return read_table(buf)


class TestL2Normalize:
    def test_three_four_five(self):
        # norm of [3, 4] is 5 by hand
        np.testing.assert_allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8], atol=1e-12)

    def test_already_unit(self):
        np.testing.assert_allclose(l2_normalize([1.0, 0.0, 0.0]), [1.0, 0.0, 0.0])

    def test_zero_vector_rejected(self):
        with pytest.raises(ZeroVector):
            l2_normalize([0.0, 0.0])

    @given(
        st.lists(
            st.floats(min_value=-1e6, max_value=1e6, allow_nan=False),
            min_size=1,
            max_size=16,
        ).filter(lambda v: np.linalg.norm(v) > 1e-9)
    )
    def test_unit_norm_and_idempotence(self, vec):
        unit = l2_normalize(vec)
        assert abs(np.linalg.norm(unit) - 1.0) <= 1e-6
        np.testing.assert_allclose(l2_normalize(unit), unit, atol=1e-6)


class TestPembFormat:
    def test_empty_table_is_header_only(self):
        buf = io.BytesIO()
        written = write_table(EmbeddingTable(dim=4), buf)
        assert written == 16  # magic + version + dim + count, 4 bytes each
        assert buf.getvalue()[:4] == b"PEMB"

    def test_single_record_byte_count(self):
        rec = EmbeddingRecord("a", 0, Modality.IMAGE_GLOBAL, np.zeros(2, dtype=np.float32))
        buf = io.BytesIO()
        written = write_table(EmbeddingTable(dim=2, records=(rec,)), buf)
        # header 16 + name_len 4 + name 1 + label 4 + modality 1 + vec_count 4 + 1*2*4
        assert written == 16 + 4 + 1 + 4 + 1 + 4 + 8

    def test_roundtrip_identity(self):
        rng = np.random.default_rng(3)
        records = (
            EmbeddingRecord("img", 2, Modality.IMAGE_GLOBAL, rng.standard_normal(5)),
            EmbeddingRecord("patches", -1, Modality.IMAGE_PATCH_SET, rng.standard_normal((3, 5))),
            EmbeddingRecord("prompt#1", 0, Modality.TEXT_PROMPT, rng.standard_normal(5)),
        )
        table = EmbeddingTable(dim=5, records=records)
        assert roundtrip(table) == table

    def test_bad_magic(self):
        with pytest.raises(BadMagic):
            read_table(io.BytesIO(b"XXXX" + b"\x00" * 12))

    def test_bad_version(self):
        buf = io.BytesIO()
        write_table(EmbeddingTable(dim=2), buf)
        data = bytearray(buf.getvalue())
        data[4] = 9
        with pytest.raises(BadVersion):
            read_table(io.BytesIO(bytes(data)))

    def test_truncated_mid_vector(self):
        rec = EmbeddingRecord("a", 0, Modality.IMAGE_GLOBAL, np.ones(4, dtype=np.float32))
        buf = io.BytesIO()
        write_table(EmbeddingTable(dim=4, records=(rec,)), buf)
        cut = buf.getvalue()[:-5]
        with pytest.raises(Truncated):
            read_table(io.BytesIO(cut))

    def test_trailing_bytes_rejected(self):
        buf = io.BytesIO()
        write_table(EmbeddingTable(dim=2), buf)
        with pytest.raises(TrailingBytes):
            read_table(io.BytesIO(buf.getvalue() + b"\x00"))

    def test_duplicate_names_rejected(self):
        buf = io.BytesIO()
        rec = EmbeddingRecord("a", 0, Modality.IMAGE_GLOBAL, np.ones(2, dtype=np.float32))
        write_table(EmbeddingTable(dim=2, records=(rec,)), buf)
        payload = buf.getvalue()
        header = payload[:12] + (2).to_bytes(4, "little")
        doubled = header + payload[16:] + payload[16:]
        with pytest.raises(DuplicateName):
            read_table(io.BytesIO(doubled))

    def test_non_finite_rejected(self):
        buf = io.BytesIO()
        rec = EmbeddingRecord("a", 0, Modality.IMAGE_GLOBAL, np.ones(1, dtype=np.float32))
        write_table(EmbeddingTable(dim=1, records=(rec,)), buf)
        data = bytearray(buf.getvalue())
        data[-4:] = np.array([np.inf], dtype="<f4").tobytes()
        with pytest.raises(NonFiniteValue):
            read_table(io.BytesIO(bytes(data)))

    def test_unknown_modality_rejected(self):
        buf = io.BytesIO()
        rec = EmbeddingRecord("a", 0, Modality.IMAGE_GLOBAL, np.ones(1, dtype=np.float32))
        write_table(EmbeddingTable(dim=1, records=(rec,)), buf)
        data = bytearray(buf.getvalue())
        # modality byte sits after header + name_len + name + label
        data[16 + 4 + 1 + 4] = 7
        with pytest.raises(BadModality):
            read_table(io.BytesIO(bytes(data)))

    def test_global_record_must_have_one_vector(self):
        with pytest.raises(FormatError):
            EmbeddingRecord("a", 0, Modality.IMAGE_GLOBAL, np.ones((2, 3), dtype=np.float32))


names = st.lists(
    st.text(alphabet=st.characters(min_codepoint=33, max_codepoint=126), min_size=1, max_size=8),
    min_size=0,
    max_size=5,
    unique=True,
)


@st.composite
def tables(draw):
    dim = draw(st.integers(min_value=1, max_value=6))
    record_names = draw(names)
    records = []
    for name in record_names:
        modality = draw(st.sampled_from(list(Modality)))
        count = 1 if modality != Modality.IMAGE_PATCH_SET else draw(st.integers(1, 3))
        values = draw(
            st.lists(
                st.floats(width=32, allow_nan=False, allow_infinity=False),
                min_size=count * dim,
                max_size=count * dim,
            )
        )
        vectors = np.array(values, dtype=np.float32).reshape(count, dim)
        label = draw(st.integers(min_value=-1, max_value=100))
        records.append(EmbeddingRecord(name, label, modality, vectors))
    return EmbeddingTable(dim=dim, records=tuple(records))


@settings(max_examples=60, deadline=None)
@given(tables())
def test_roundtrip_bit_exact(table):
    assert roundtrip(table) == table


class TestSynthDataset:
    def test_zero_spread_collapses_to_means(self):
        spec = SynthSpec(num_classes=2, per_class=3, dim=8, patches_per_image=2,
                         cluster_spread=0.0, seed=5)
        images, patches, means = synth_dataset(spec)
        mean_by_label = {rec.label: rec.vectors[0] for rec in means.records}
        for rec in images.records:
            np.testing.assert_array_equal(rec.vectors[0], mean_by_label[rec.label])
        for rec in patches.records:
            for vec in rec.vectors:
                np.testing.assert_array_equal(vec, mean_by_label[rec.label])

    def test_deterministic_per_seed(self):
        spec = SynthSpec(num_classes=3, per_class=4, dim=6, patches_per_image=3,
                         cluster_spread=0.2, seed=9)
        assert synth_dataset(spec) == synth_dataset(spec)

    def test_different_seed_differs(self):
        base = SynthSpec(num_classes=3, per_class=4, dim=6, seed=9)
        other = SynthSpec(num_classes=3, per_class=4, dim=6, seed=10)
        assert synth_dataset(base)[0] != synth_dataset(other)[0]

    def test_record_counts(self):
        spec = SynthSpec(num_classes=3, per_class=5, dim=4, patches_per_image=4, seed=0)
        images, patches, means = synth_dataset(spec)
        assert len(images) == 15
        assert len(patches) == 15
        assert all(rec.vectors.shape == (4, 4) for rec in patches.records)
        assert len(means) == 3

    def test_spec_validation(self):
        with pytest.raises(FormatError):
            SynthSpec(num_classes=1, per_class=5, dim=4)
        with pytest.raises(FormatError):
            SynthSpec(num_classes=2, per_class=0, dim=4)
        with pytest.raises(FormatError):
            SynthSpec(num_classes=2, per_class=1, dim=4, cluster_spread=-0.1)
