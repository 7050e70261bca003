#!/usr/bin/env python3
"""Train the tiny binary LeNet used by the acceptance suite and write it as a
FLIMMD01 model container.

    python3 tools/train_tiny_bnn.py --train /tmp/mnist/train --test /tmp/mnist/test \
        --out crates/core/tests/data/tiny_lenet.flimmd

Architecture (NHWC, valid padding, stride 1):
    binarize(x > 0.5) -> conv_1 5x5x16 -> pool 2 -> bn/sign
    -> conv_2 5x5x32 -> pool 2 -> bn/sign -> flatten
    -> dense_0 512x128 -> bn/sign -> dense_1 128x10 (integer logits)

Batch norms are folded into integer thresholds; the folded model is checked
against the float network on the test split before writing.
"""
import argparse
import json
import math
import struct

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


def read_idx(prefix):
    raw = np.fromfile(prefix + "-images-idx3-ubyte", dtype=np.uint8)
    n = struct.unpack(">I", raw[4:8].tobytes())[0]
    images = raw[16:].reshape(n, 28, 28)
    labels = np.fromfile(prefix + "-labels-idx1-ubyte", dtype=np.uint8)[8:]
    return images, labels.astype(np.int64)


class SignSTE(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return torch.where(x >= 0, torch.ones_like(x), -torch.ones_like(x))

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return g * (x.abs() <= 1).to(g.dtype)


sign = SignSTE.apply


class BinConv(nn.Conv2d):
    def forward(self, x):
        return F.conv2d(x, sign(self.weight), None, self.stride, self.padding)


class BinDense(nn.Linear):
    def forward(self, x):
        return F.linear(x, sign(self.weight))


class TinyLeNet(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv_1 = BinConv(1, 16, 5, bias=False)
        self.bn_1 = nn.BatchNorm2d(16)
        self.conv_2 = BinConv(16, 32, 5, bias=False)
        self.bn_2 = nn.BatchNorm2d(32)
        self.dense_0 = BinDense(512, 128, bias=False)
        self.bn_3 = nn.BatchNorm1d(128)
        self.dense_1 = BinDense(128, 10, bias=False)
        self.scale = nn.Parameter(torch.tensor(0.1))

    def features(self, x):
        x = sign(self.bn_1(F.max_pool2d(self.conv_1(x), 2)))
        x = sign(self.bn_2(F.max_pool2d(self.conv_2(x), 2)))
        x = x.permute(0, 2, 3, 1).reshape(x.shape[0], -1)
        x = sign(self.bn_3(self.dense_0(x)))
        return self.dense_1(x)

    def forward(self, x):
        return self.features(x) * self.scale.abs()


def binarize(images):
    x = torch.from_numpy(images.astype(np.float32) / 255.0)[:, None]
    return torch.where(x > 0.5, 1.0, -1.0)


def shift_batch(x, rng):
    out = torch.full_like(x, -1.0)
    for i in range(x.shape[0]):
        dy, dx = rng.integers(-2, 3, size=2)
        src = x[i, :, max(0, -dy):28 - max(0, dy), max(0, -dx):28 - max(0, dx)]
        out[i, :, max(0, dy):max(0, dy) + src.shape[1], max(0, dx):max(0, dx) + src.shape[2]] = src
    return out


def fold(bn, k):
    """Return (thresholds, directions) with d*(x - t) >= 0 <=> bn(x) >= 0 for all x in [-k, k]."""
    mean = bn.running_mean.double().numpy()
    std = np.sqrt(bn.running_var.double().numpy() + bn.eps)
    gamma = bn.weight.detach().double().numpy()
    beta = bn.bias.detach().double().numpy()
    xs = torch.arange(-k, k + 1, dtype=torch.float32)
    ts, ds = [], []
    for c in range(len(mean)):
        # reference decision, computed the way the float network computes it
        ref = ((xs - bn.running_mean[c]) / torch.sqrt(bn.running_var[c] + bn.eps)
               * bn.weight[c] + bn.bias[c]).detach() >= 0
        ref = ref.numpy()
        if gamma[c] == 0:
            cand = [(-k - 1, 1)] if beta[c] >= 0 else [(k + 1, 1)]
        else:
            v = mean[c] - beta[c] * std[c] / gamma[c]
            d = 1 if gamma[c] > 0 else -1
            base = math.ceil(v) if d > 0 else math.floor(v)
            base = int(min(max(base, -k - 1), k + 1))
            cand = [(base + off, d) for off in (0, -1, 1, -2, 2)]
        for t, d in cand:
            got = d * (xs.numpy().astype(np.int64) - t) >= 0
            if np.array_equal(got, ref):
                ts.append(t)
                ds.append(d)
                break
        else:
            raise SystemExit(f"threshold fold failed for channel {c}")
    return np.asarray(ts, dtype=np.int32), np.asarray(ds, dtype=np.int32)


def pack_bits(signs):
    bits = (np.asarray(signs).reshape(-1) > 0).astype(np.uint8)
    return np.packbits(bits, bitorder="little").tobytes()


def write_container(path, model):
    payload = bytearray()

    def blob(data):
        off = len(payload)
        payload.extend(data)
        return {"offset": off, "len": len(data)}

    def weights(w):
        return np.where(w.detach().numpy() >= 0, 1, -1)

    layers = [{"kind": "input_binarize", "name": "binarize", "params": {}, "blobs": {}}]
    # torch conv weight is [out][in][kh][kw]; container wants [out][kh][kw][in]
    for conv, bn, pool_name, bn_name, cin, cout, k in (
        (model.conv_1, model.bn_1, "pool_1", "bn_1", 1, 16, 25),
        (model.conv_2, model.bn_2, "pool_2", "bn_2", 16, 32, 400),
    ):
        w = weights(conv.weight).transpose(0, 2, 3, 1)
        name = "conv_1" if conv is model.conv_1 else "conv_2"
        layers.append({
            "kind": "binary_conv2d", "name": name,
            "params": {"in_channels": cin, "out_channels": cout, "kernel": [5, 5],
                       "stride": [1, 1], "padding": "valid"},
            "blobs": {"weights": blob(pack_bits(w))},
        })
        layers.append({"kind": "max_pool2d", "name": pool_name,
                       "params": {"window": [2, 2], "stride": [2, 2]}, "blobs": {}})
        t, d = fold(bn, k)
        layers.append({
            "kind": "threshold", "name": bn_name, "params": {"channels": cout},
            "blobs": {"thresholds": blob(t.astype("<i4").tobytes()),
                      "directions": blob(d.astype("<i4").tobytes())},
        })
    layers.append({"kind": "flatten", "name": "flatten", "params": {}, "blobs": {}})
    layers.append({
        "kind": "binary_dense", "name": "dense_0",
        "params": {"in_features": 512, "out_features": 128},
        "blobs": {"weights": blob(pack_bits(weights(model.dense_0.weight)))},
    })
    t, d = fold(model.bn_3, 512)
    layers.append({
        "kind": "threshold", "name": "bn_3", "params": {"channels": 128},
        "blobs": {"thresholds": blob(t.astype("<i4").tobytes()),
                  "directions": blob(d.astype("<i4").tobytes())},
    })
    layers.append({
        "kind": "binary_dense", "name": "dense_1",
        "params": {"in_features": 128, "out_features": 10},
        "blobs": {"weights": blob(pack_bits(weights(model.dense_1.weight)))},
    })
    manifest = {
        "version": 1, "name": "tiny_lenet", "input_shape": [28, 28, 1],
        "class_count": 10, "input_threshold": 0.5, "layers": layers,
    }
    text = json.dumps(manifest, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(b"FLIMMD01")
        f.write(struct.pack("<I", len(text)))
        f.write(text)
        f.write(payload)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--train", required=True)
    ap.add_argument("--test", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    torch.manual_seed(args.seed)
    rng = np.random.default_rng(args.seed)
    tr_x, tr_y = read_idx(args.train)
    te_x, te_y = read_idx(args.test)
    xtr, ytr = binarize(tr_x), torch.from_numpy(tr_y)
    xte, yte = binarize(te_x), torch.from_numpy(te_y)

    model = TinyLeNet()
    opt = torch.optim.Adam(model.parameters(), lr=3e-3)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, args.epochs)
    for epoch in range(args.epochs):
        model.train()
        perm = torch.from_numpy(rng.permutation(len(xtr)))
        for i in range(0, len(perm), 64):
            idx = perm[i:i + 64]
            xb = shift_batch(xtr[idx], rng)
            loss = F.cross_entropy(model(xb), ytr[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                for m in (model.conv_1, model.conv_2, model.dense_0, model.dense_1):
                    m.weight.clamp_(-1, 1)
        sched.step()
        model.eval()
        with torch.no_grad():
            acc = (model.features(xte).argmax(1) == yte).float().mean().item()
        print(f"epoch {epoch} loss {loss.item():.3f} test {acc:.4f}", flush=True)

    model.eval()
    with torch.no_grad():
        logits = model.features(xte)
    write_container(args.out, model)
    acc = (logits.argmax(1) == yte).float().mean().item()
    np.savetxt(args.out + ".logits.txt", logits.numpy().astype(np.int64), fmt="%d")
    print(f"final test accuracy {acc:.4f}")


if __name__ == "__main__":
    main()
