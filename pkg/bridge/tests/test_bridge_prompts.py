"""Prompt-bank extraction mechanics."""
import json

import pytest

from pembridge.encoders import HashEncoder
from pembridge.extract import ExtractionError, ExtractionJob, extract_prompts


def write_bank(path, categories, n=2, siblings=1):
    """A minimal conforming bank export: positives 1..n, negatives after."""
    entries = []
    for cat in categories:
        for pos in range(1, n + 1):
            entries.append(
                {
                    "category": cat,
                    "kind": "positive",
                    "source_category": cat,
                    "feature_position": pos,
                    "flat_index": pos,
                    "text": f"a photo of a {cat}, which has trait {pos}",
                }
            )
        for r in range(1, siblings + 1):
            for pos in range(1, n + 1):
                entries.append(
                    {
                        "category": cat,
                        "kind": "negative",
                        "source_category": f"sib{r}",
                        "feature_position": pos,
                        "flat_index": r * n + pos,
                        "text": f"a photo of a {cat}, which has no trait {pos}",
                    }
                )
    path.write_text(json.dumps(entries), encoding="utf-8")
    return entries


def make_job(source, out, dim=24):
    return ExtractionJob(source=source, encoder=HashEncoder(dim=dim), out_path=out)


class TestExtractPrompts:
    def test_single_prompt(self, tmp_path):
        bank = tmp_path / "bank.json"
        bank.write_text(
            json.dumps([{"category": "tiger", "kind": "positive", "source_category": "tiger",
                         "feature_position": 1, "flat_index": 1,
                         "text": "a photo of a tiger, which has striped fur"}]),
            encoding="utf-8",
        )
        out = tmp_path / "p.pemb"
        stats = extract_prompts(make_job(bank, out))
        assert stats == {"records": 1, "categories": 1, "dim": 24}

    def test_names_and_order(self, tmp_path):
        bank = tmp_path / "bank.json"
        write_bank(bank, ["tiger", "wolf"], n=2, siblings=1)
        out = tmp_path / "p.pemb"
        extract_prompts(make_job(bank, out))

        from promptood.store import load_table

        table = load_table(out)
        names = [rec.name for rec in table.records]
        assert names[:4] == ["tiger#1", "tiger#2", "tiger#3", "tiger#4"]
        assert names[4:] == ["wolf#1", "wolf#2", "wolf#3", "wolf#4"]
        assert table.by_name()["wolf#1"].label == 1

    def test_text_encoded_verbatim(self, tmp_path):
        # the same prompt text must embed to the same vector, no re-templating
        bank_a = tmp_path / "a.json"
        bank_b = tmp_path / "b.json"
        text = "a photo of a tiger, which has striped fur"
        for path, cat in ((bank_a, "tiger"), (bank_b, "other")):
            path.write_text(
                json.dumps([{"category": cat, "kind": "positive", "source_category": cat,
                             "feature_position": 1, "flat_index": 1, "text": text}]),
                encoding="utf-8",
            )
        out_a, out_b = tmp_path / "a.pemb", tmp_path / "b.pemb"
        extract_prompts(make_job(bank_a, out_a))
        extract_prompts(make_job(bank_b, out_b))

        from promptood.store import load_table
        import numpy as np

        va = load_table(out_a).records[0].vectors
        vb = load_table(out_b).records[0].vectors
        np.testing.assert_array_equal(va, vb)

    def test_malformed_bank_is_hard_error(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps([{"category": "x"}]), encoding="utf-8")
        with pytest.raises(ExtractionError):
            extract_prompts(make_job(bad, tmp_path / "o.pemb"))

    def test_empty_bank_is_hard_error(self, tmp_path):
        bad = tmp_path / "empty.json"
        bad.write_text("[]", encoding="utf-8")
        with pytest.raises(ExtractionError):
            extract_prompts(make_job(bad, tmp_path / "o.pemb"))
