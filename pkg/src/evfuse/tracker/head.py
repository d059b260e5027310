"""Trainable part of the tracker: fusion (optionally) plus the FC classifier."""
from __future__ import annotations

import numpy as np

from .. import fusion as fu
from ..nn import functional as F

HIDDEN = 512


class Classifier:
    """fc4 -> ReLU -> fc5 -> ReLU -> fc6, with one fc6 per training domain.

    fc4 is initialised block-wise: each ``block_size`` slice of input
    columns draws from its own seeded stream, so the weights seen by a given
    modality block do not depend on how many blocks follow it.
    """

    def __init__(self, in_dim: int, seed: int, block_size: int | None = None,
                 n_domains: int = 1, dtype=np.float32, stream: int = 0):
        block_size = block_size or in_dim
        cols = []
        for start in range(0, in_dim, block_size):
            rng = np.random.default_rng([seed, 101, stream + start // block_size])
            width = min(block_size, in_dim - start)
            cols.append(rng.standard_normal((HIDDEN, width)) * np.sqrt(2.0 / block_size))
        rng = np.random.default_rng([seed, 102, stream])
        self.params = {
            "fc4.weight": np.concatenate(cols, axis=1),
            "fc4.bias": np.zeros(HIDDEN),
            "fc5.weight": rng.standard_normal((HIDDEN, HIDDEN)) * np.sqrt(2.0 / HIDDEN),
            "fc5.bias": np.zeros(HIDDEN),
        }
        self.params.update(self.new_domain_head(seed, n_domains, stream))
        self.block_size = block_size
        self.params = {k: v.astype(dtype) for k, v in self.params.items()}
        self.n_domains = n_domains
        self._cache = None

    @staticmethod
    def new_domain_head(seed: int, n_domains: int = 1, stream: int = 0) -> dict:
        rng = np.random.default_rng([seed, 103, stream])
        return {"fc6.weight": rng.standard_normal((n_domains, 2, HIDDEN)) * np.sqrt(1.0 / HIDDEN),
                "fc6.bias": np.zeros((n_domains, 2))}

    def forward(self, x, domain: int | None = 0, keep_cache: bool = False):
        """Logits (N, 2) for ``domain``; (N, n_domains, 2) when ``domain`` is None."""
        p = self.params
        z4 = self._fc4(x)
        h4 = F.relu(z4)
        z5 = F.fc(h4, p["fc5.weight"], p["fc5.bias"])
        h5 = F.relu(z5)
        if domain is None:
            out = np.einsum("nh,dkh->ndk", h5, p["fc6.weight"]) + p["fc6.bias"][None]
        else:
            out = F.fc(h5, p["fc6.weight"][domain], p["fc6.bias"][domain])
        if keep_cache:
            self._cache = (x, z4, h4, z5, h5, domain)
        return out

    def _fc4(self, x):
        # one product per modality block, summed in order; an all-zero
        # block then adds exact zeros and leaves the other block's result intact
        w, b = self.params["fc4.weight"], self.params["fc4.bias"]
        bs = self.block_size
        if x.shape[-1] != w.shape[1]:
            raise ValueError(f"fc: input dim {x.shape[-1]} vs weight shape {w.shape}")
        z = F.fc(x[..., :bs], w[:, :bs], b)
        for s in range(bs, w.shape[1], bs):
            z = z + x[..., s:s + bs] @ w[:, s:s + bs].T
        return z

    def backward(self, dout):
        """Returns ``(dx, grads)`` for the last cached forward."""
        x, z4, h4, z5, h5, domain = self._cache
        p = self.params
        grads = {}
        if domain is None:
            dh5 = np.einsum("ndk,dkh->nh", dout, p["fc6.weight"])
            grads["fc6.weight"] = np.einsum("ndk,nh->dkh", dout, h5)
            grads["fc6.bias"] = dout.sum(axis=0)
        else:
            dh5, dw6, db6 = F.fc_backward(dout, h5, p["fc6.weight"][domain])
            grads["fc6.weight"] = np.zeros_like(p["fc6.weight"])
            grads["fc6.weight"][domain] = dw6
            grads["fc6.bias"] = np.zeros_like(p["fc6.bias"])
            grads["fc6.bias"][domain] = db6
        dz5 = F.relu_backward(dh5, z5)
        dh4, grads["fc5.weight"], grads["fc5.bias"] = F.fc_backward(dz5, h4, p["fc5.weight"])
        dz4 = F.relu_backward(dh4, z4)
        w4, bs = p["fc4.weight"], self.block_size
        parts = [F.fc_backward(dz4, x[..., s:s + bs], w4[:, s:s + bs]) for s in range(0, w4.shape[1], bs)]
        dx = np.concatenate([d for d, _, _ in parts], axis=-1)
        grads["fc4.weight"] = np.concatenate([g for _, g, _ in parts], axis=1)
        grads["fc4.bias"] = parts[0][2]
        return dx, grads


def positive_score(logits) -> np.ndarray:
    """Positive-class score: positive minus negative logit (> 0 means p > 0.5)."""
    return logits[..., 1] - logits[..., 0]


class TrackerHead:
    """Maps per-proposal RoI features to two-way logits.

    RoI features arrive as ``(N, B, C, HW)`` with one branch per modality
    (B = 2) or a single input-fused branch (B = 1). ``encode`` turns them
    into what the sample memory stores: fused features when the fusion
    stage is frozen, the raw RoI features when it trains (``raw``).
    """

    def __init__(self, fusion: str, modality: str, channels: int, hw: int, seed: int,
                 train_fusion: bool = False, dtype=np.float32, cmt_weights=None,
                 n_domains: int = 1):
        if fusion not in fu.FUSION_STRATEGIES:
            raise ValueError(f"unknown fusion strategy {fusion!r}")
        self.fusion = fusion if modality == "both" else "single"
        self.modality = modality
        self.channels, self.hw = channels, hw
        self.dtype = dtype
        block = channels * hw
        self.fusion_params: dict = {}
        if self.fusion == "cmt":
            w = cmt_weights if cmt_weights is not None else fu.CMTWeights.init(channels, hw, rng=[seed, 202])
            self.cmt = w.astype(dtype)
            self.fusion_params = self.cmt.params
        elif self.fusion.startswith("mid."):
            self.fusion_params = {k: v.astype(dtype) for k, v in
                                  fu.init_middle_params(self.fusion[4:], channels).items()}
        # raw: memory keeps un-fused RoI features and fusion runs inside the
        # differentiable path (needed to train fusion or the backbone)
        self.raw = bool(train_fusion)
        self.train_fusion = bool(train_fusion and self.fusion_params)

        dims = {"cmt": 2 * block, "mid.concat": 2 * block, "mid.catt": 2 * block,
                "mid.satt": 2 * block, "mid.add": block, "mid.conv1x1": block}
        if self.fusion == "late.average":
            self.classifiers = [Classifier(block, seed, block, n_domains, dtype, stream=i) for i in range(2)]
        else:
            stream = 1 if modality == "event" else 0
            in_dim = dims.get(self.fusion, block)
            self.classifiers = [Classifier(in_dim, seed, block, n_domains, dtype, stream=stream)]
        self._cache = None
        self.input_grad = None

    @property
    def n_branches(self) -> int:
        return 2 if self.fusion in ("cmt", "late.average") or self.fusion.startswith("mid.") else 1

    @property
    def params(self) -> dict:
        out = {}
        if self.train_fusion:
            out.update({f"fusion.{k}": v for k, v in self.fusion_params.items()})
        for i, clf in enumerate(self.classifiers):
            out.update({f"clf{i}.{k}": v for k, v in clf.params.items()})
        return out

    def all_params(self) -> dict:
        out = {f"fusion.{k}": v for k, v in self.fusion_params.items()}
        for i, clf in enumerate(self.classifiers):
            out.update({f"clf{i}.{k}": v for k, v in clf.params.items()})
        return out

    # ------------------------------------------------------------ fusion

    def _fuse(self, rois, keep_cache=False):
        """(N, B, C, HW) -> list of (N, D) classifier inputs."""
        n = rois.shape[0]
        if self.fusion == "cmt":
            if keep_cache:
                out, cache = fu.cmt_fuse_forward(rois[:, 0], rois[:, 1], self.cmt)
                return [out], cache
            return [fu.cmt_fuse(rois[:, 0], rois[:, 1], self.cmt)], None
        if self.fusion.startswith("mid."):
            strategy = self.fusion[4:]
            out, cache = fu.middle_fuse_forward(rois[:, 0], rois[:, 1], strategy, self.fusion_params)
            return [out.reshape(n, -1)], cache
        if self.fusion == "late.average":
            return [rois[:, 0].reshape(n, -1), rois[:, 1].reshape(n, -1)], None
        return [rois[:, 0].reshape(n, -1)], None

    def encode(self, rois: np.ndarray, chunk: int = 512) -> np.ndarray:
        rois = np.asarray(rois, dtype=self.dtype)
        if self.raw:
            return rois
        parts = []
        for s in range(0, len(rois), chunk):
            feats, _ = self._fuse(rois[s:s + chunk])
            parts.append(np.stack(feats, axis=1))
        if not parts:
            return np.zeros((0, len(self.classifiers), self.classifiers[0].params["fc4.weight"].shape[1]),
                            dtype=self.dtype)
        return np.concatenate(parts)

    # ------------------------------------------------------------ forward / backward

    def logits(self, encoded, domain: int | None = 0, keep_cache: bool = False):
        fcache = None
        if self.raw:
            feats, fcache = self._fuse(encoded, keep_cache=True)
        else:
            feats = [encoded[:, i] for i in range(encoded.shape[1])]
        outs = [clf.forward(x, domain, keep_cache) for clf, x in zip(self.classifiers, feats)]
        if keep_cache:
            self._cache = (encoded, fcache)
        if len(outs) == 1:
            return outs[0]
        return fu.late_fuse(outs[0], outs[1]).astype(outs[0].dtype)

    def scores(self, encoded, chunk: int = 1024) -> np.ndarray:
        if len(encoded) == 0:
            return np.zeros(0)
        return np.concatenate([positive_score(self.logits(encoded[s:s + chunk]))
                               for s in range(0, len(encoded), chunk)])

    def backward(self, dlogits) -> dict:
        """Gradients of the trainable parameters after ``logits(..., keep_cache=True)``.

        Late fusion averages the two heads, so each gets half the upstream gradient.
        """
        encoded, fcache = self._cache
        grads, dfeats = {}, []
        share = dlogits / len(self.classifiers) if len(self.classifiers) > 1 else dlogits
        for i, clf in enumerate(self.classifiers):
            dx, g = clf.backward(share)
            dfeats.append(dx)
            grads.update({f"clf{i}.{k}": v for k, v in g.items()})
        self.input_grad = None
        if self.raw:
            n = encoded.shape[0]
            shape = (n, self.channels, self.hw)
            if self.fusion == "cmt":
                dv, de, g = fu.cmt_fuse_backward(dfeats[0], fcache)
            elif self.fusion.startswith("mid."):
                strategy = self.fusion[4:]
                dout = dfeats[0].reshape(n, -1, self.hw)
                dv, de, g = fu.middle_fuse_backward(dout, encoded[:, 0], strategy, self.fusion_params, fcache)
            else:
                g = {}
                branches = [d.reshape(shape) for d in dfeats]
            if self.fusion == "cmt" or self.fusion.startswith("mid."):
                branches = [dv, de]
            if self.train_fusion:
                grads.update({f"fusion.{k}": v for k, v in g.items()})
            # gradient w.r.t. the (N, B, C, HW) RoI features, for backbone training
            self.input_grad = np.stack(branches, axis=1)
        return grads
