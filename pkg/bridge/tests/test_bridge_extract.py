"""Image-folder extraction mechanics on tiny synthetic images."""
import json

import numpy as np
import pytest
from PIL import Image

from pembridge.cli import main
from pembridge.encoders import EncoderError, HashEncoder, make_encoder
from pembridge.extract import ExtractionError, ExtractionJob, extract_images


def paint(path, seed, size=(24, 18)):
    rng = np.random.default_rng(seed)
    data = rng.integers(0, 256, size=(size[1], size[0], 3), dtype=np.uint8)
    Image.fromarray(data, "RGB").save(path)


@pytest.fixture
def image_root(tmp_path):
    root = tmp_path / "imgs"
    for label, cls in enumerate(("cats", "dogs")):
        (root / cls).mkdir(parents=True)
        for i in range(2):
            paint(root / cls / f"{i:02d}.png", seed=10 * label + i)
    return root


def job_for(root, out, dim=32, grid=2, patches=True):
    return ExtractionJob(
        source=root, encoder=HashEncoder(dim=dim, grid=grid), out_path=out, patches=patches
    )


class TestExtractImages:
    def test_record_layout(self, image_root, tmp_path):
        out = tmp_path / "images.pemb"
        stats = extract_images(job_for(image_root, out))
        assert stats == {"records": 8, "classes": 2, "skipped": 0, "dim": 32}
        payload = out.read_bytes()
        assert payload[:4] == b"PEMB"

    def test_labels_follow_sorted_subfolder_order(self, image_root, tmp_path):
        out = tmp_path / "images.pemb"
        extract_images(job_for(image_root, out))
        # independent decode of (name, label) pairs via the primary engine
        from promptood.store import load_table, Modality

        table = load_table(out)
        labels = {rec.name.split("/")[0] for rec in table.records if rec.label == 0}
        assert labels == {"cats"}
        patch_recs = table.select(Modality.IMAGE_PATCH_SET)
        assert len(patch_recs) == 4
        assert all(rec.vectors.shape == (4, 32) for rec in patch_recs)  # 2x2 grid

    def test_no_patches_mode(self, image_root, tmp_path):
        out = tmp_path / "flat.pemb"
        stats = extract_images(job_for(image_root, out, patches=False))
        assert stats["records"] == 4
        from promptood.store import load_table, Modality

        table = load_table(out)
        assert not table.select(Modality.IMAGE_PATCH_SET)
        assert all(rec.name.endswith("@global") for rec in table.records)

    def test_rerun_is_byte_identical(self, image_root, tmp_path):
        first = tmp_path / "a.pemb"
        second = tmp_path / "b.pemb"
        extract_images(job_for(image_root, first))
        extract_images(job_for(image_root, second))
        assert first.read_bytes() == second.read_bytes()

    def test_empty_folder_yields_valid_empty_file(self, tmp_path):
        root = tmp_path / "empty"
        root.mkdir()
        out = tmp_path / "empty.pemb"
        stats = extract_images(job_for(root, out))
        assert stats["records"] == 0
        from promptood.store import load_table

        assert len(load_table(out)) == 0

    def test_unreadable_image_is_skipped_with_sidecar(self, image_root, tmp_path, capsys):
        (image_root / "cats" / "broken.png").write_bytes(b"this is not an image")
        out = tmp_path / "images.pemb"
        stats = extract_images(job_for(image_root, out))
        assert stats["skipped"] == 1
        assert stats["records"] == 8  # the four good images still land
        assert "broken.png" in capsys.readouterr().err
        sidecar = json.loads((tmp_path / "images.pemb.skipped.json").read_text())
        assert len(sidecar) == 1 and "broken.png" in sidecar[0]["path"]

    def test_missing_directory(self, tmp_path):
        with pytest.raises(ExtractionError):
            extract_images(job_for(tmp_path / "nope", tmp_path / "o.pemb"))


class TestEncoderSpecs:
    def test_hash_defaults(self):
        enc = make_encoder("hash")
        assert enc.dim == 512 and enc.grid == 4

    def test_hash_with_dim_and_grid(self):
        enc = make_encoder("hash:64:3")
        assert enc.dim == 64 and enc.grid == 3

    @pytest.mark.parametrize("spec", ["hash:zero", "hash:0", "nope:1", "clip:"])
    def test_bad_specs(self, spec):
        with pytest.raises(EncoderError):
            make_encoder(spec)

    def test_text_and_image_are_unit_and_deterministic(self):
        enc = HashEncoder(dim=16, grid=2)
        t1 = enc.encode_text("a photo of a tiger, which has striped fur")
        t2 = enc.encode_text("a photo of a tiger, which has striped fur")
        np.testing.assert_array_equal(t1, t2)
        assert abs(np.linalg.norm(t1.astype(np.float64)) - 1.0) < 1e-5
        img = Image.fromarray(np.zeros((20, 20, 3), dtype=np.uint8), "RGB")
        pooled, patches = enc.encode_image(img)
        assert pooled.shape == (16,) and patches.shape == (4, 16)


class TestCli:
    def test_images_roundtrip(self, image_root, tmp_path):
        out = tmp_path / "cli.pemb"
        assert main(["--images", str(image_root), "--encoder", "hash:16:2",
                     "--out", str(out)]) == 0
        from promptood.store import load_table

        assert load_table(out).dim == 16

    def test_unknown_encoder_exits_one(self, image_root, tmp_path):
        assert main(["--images", str(image_root), "--encoder", "wat:1",
                     "--out", str(tmp_path / "x.pemb")]) == 1

    def test_clip_encoder_if_available(self, image_root, tmp_path):
        pytest.importorskip("transformers")
        from pembridge.encoders import ClipEncoder

        try:
            encoder = ClipEncoder("openai/clip-vit-base-patch16")
        except EncoderError as exc:
            pytest.skip(f"CLIP checkpoint unavailable: {exc}")
        assert encoder.dim == 512  # the published ViT-B/16 projection width
        out = tmp_path / "clip.pemb"
        stats = extract_images(ExtractionJob(source=image_root, encoder=encoder,
                                             out_path=out, patches=True))
        from promptood.store import load_table, Modality

        table = load_table(out)
        assert table.dim == 512
        patch_recs = table.select(Modality.IMAGE_PATCH_SET)
        assert patch_recs and patch_recs[0].vectors.shape == (196, 512)  # 14x14 tokens
