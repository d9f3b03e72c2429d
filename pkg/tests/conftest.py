import numpy as np
import pytest

from msrspeech import dsp
from msrspeech.dsp import mfcc
from msrspeech.objective import assign_labels, kmeans_fit


def grad_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """Norm-based relative error between gradient estimates.

    The floor keeps the ratio meaningful when the true gradient is
    structurally zero and both estimates are pure round-off noise.
    """
    a = np.linalg.norm(analytic)
    n = np.linalg.norm(numeric)
    return float(np.linalg.norm(analytic - numeric) / max(a, n, floor))


def central_difference(fn, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. every element."""
    out = np.zeros_like(arr, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + h
        fp = fn()
        arr[idx] = orig - h
        fm = fn()
        arr[idx] = orig
        out[idx] = (fp - fm) / (2.0 * h)
    return out


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """12 utterances x 4 rates x 1.5 s, with pooled k-means labels."""
    root = tmp_path_factory.mktemp("small_corpus")
    spec = dsp.CorpusSpec(duration_s=1.5, num_classes=3, count=12, seed=13)
    entries, tracks = dsp.generate_corpus(spec, root)
    dsp.write_manifest(root / "manifest.tsv", entries)
    dsp.write_segment_tracks(root / "segments.tsv", tracks)

    pool = []
    per_utt = {}
    for e in entries:
        feats = mfcc(dsp.read_wav(root / e.path))
        per_utt[e.utt_id] = feats.frames
        pool.append(feats.frames)
    codebook = kmeans_fit(np.vstack(pool), 8, seed=13, embed_dim=16)
    labels = {uid: assign_labels(f, codebook) for uid, f in per_utt.items()}
    return {
        "dir": root,
        "spec": spec,
        "entries": entries,
        "tracks": tracks,
        "codebook": codebook,
        "labels": labels,
    }
