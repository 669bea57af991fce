"""Smoke test for the orchestrion Python module.

Build and install the module first:

    pip install ./crates/python --no-build-isolation

then run `python python/smoke_test.py`.
"""

import math
import os
import tempfile

import orchestrion as orc


def main():
    lead = orc.LeadSheet.toy(seed=3)
    assert lead.bar_count == 32
    assert lead.phrases == "A8A8B8B8"

    db = orc.PhraseDb.toy(songs=8, seed=3)
    sketch = orc.arrange_piano(lead, db)
    assert sketch.bar_count == 32 and len(sketch) == 2

    band = orc.toy_band(bars=8, seed=5)
    assert orc.s_pitch(band, band) == 1.0
    again = orc.Piece.from_json(band.to_json())
    assert again == band

    # A small, fast recipe: enough to exercise training and sampling end to end.
    codec, prior, db, corpus = orc.train_toy(seed=1, pieces=4, bars=4, codec_epochs=2, prior_steps=5)
    instruments = corpus[0].instruments

    with tempfile.TemporaryDirectory() as tmp:
        codec.save(os.path.join(tmp, "codec.ckpt"))
        prior.save(os.path.join(tmp, "prior.ckpt"))
        codec = orc.Codec.load(os.path.join(tmp, "codec.ckpt"))
        prior = orc.Prior.load(os.path.join(tmp, "prior.ckpt"))

        piano = band.downmix()
        a = orc.orchestrate(codec, prior, piano, instruments, seed=7)
        b = orc.orchestrate(codec, prior, piano, instruments, seed=7)
        assert a == b, "orchestration must be deterministic for a fixed seed"
        assert a.bar_count == piano.bar_count and a.instruments == instruments

        out = orc.arrange(lead, db, codec, prior, instruments, beta=0.5, seed=1)
        assert out.bar_count == 32 and len(out) == len(instruments) + 1
        path = os.path.join(tmp, "arrangement.mid")
        out.write_midi(path)
        assert orc.Piece.read_midi(path).bar_count == 32

    report = dict(orc.evaluate(a, piano=piano))
    for name in ("s_pitch", "s_groove", "g_mix", "g_track"):
        assert 0.0 <= report[name] <= 1.0 + 1e-12, (name, report[name])
    assert report["a_chord"] is None

    index, score, opening = orc.donor_search(piano, corpus + [band], alpha=0.0)
    assert index == len(corpus) and math.isclose(score, 1.0)
    assert opening.bar_count == 2

    try:
        orc.orchestrate(codec, prior, band, instruments)
    except ValueError as e:
        assert "downmix" in str(e)
    else:
        raise AssertionError("multi-track input must be rejected")
    try:
        orc.Piece.read_midi("/nonexistent/x.mid")
    except OSError:
        pass
    else:
        raise AssertionError("missing file must raise OSError")

    print("python smoke test ok:", report)


if __name__ == "__main__":
    main()
