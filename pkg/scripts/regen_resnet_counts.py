#!/usr/bin/env python3
"""Re-derive the per-layer occurrence counts in the ResNet-50 layer table.

Walks the standard bottleneck topology (stem conv plus four stages of
bottleneck blocks with 1x1-strided downsampling), maps every convolution to
its row in the distinct-layer table, and checks the counts shipped in
brkernels.bench. The counts only affect weighted-efficiency aggregation,
never the kernels.
"""

from collections import Counter

from brkernels.bench import _RESNET50_ROWS

# (blocks, in_channels, mid_channels, out_channels, input_spatial, first_stride)
STAGES = [
    (3, 64, 64, 256, 56, 1),
    (4, 256, 128, 512, 56, 2),
    (6, 512, 256, 1024, 28, 2),
    (3, 1024, 512, 2048, 14, 2),
]


def enumerate_convs():
    convs = [(3, 64, 224, 7, 2)]  # stem: (C, K, H, R, stride)
    for blocks, c_in, c_mid, c_out, h_in, stride in STAGES:
        h_out = h_in // stride
        # First block reduces with a strided 1x1 and carries a projection shortcut.
        convs.append((c_in, c_mid, h_in, 1, stride))
        convs.append((c_mid, c_mid, h_out, 3, 1))
        convs.append((c_mid, c_out, h_out, 1, 1))
        convs.append((c_in, c_out, h_in, 1, stride))  # shortcut projection
        for _ in range(blocks - 1):
            convs.append((c_out, c_mid, h_out, 1, 1))
            convs.append((c_mid, c_mid, h_out, 3, 1))
            convs.append((c_mid, c_out, h_out, 1, 1))
    return convs


def main():
    by_shape = {
        (c, k, h, r, stride): (lid, count)
        for lid, c, k, h, _w, r, _s, stride, count in _RESNET50_ROWS
    }
    derived = Counter()
    for conv in enumerate_convs():
        if conv not in by_shape:
            raise SystemExit(f"conv {conv} has no row in the layer table")
        derived[by_shape[conv][0]] += 1

    total = sum(derived.values())
    print("id  C     K     H    R  str  count")
    ok = True
    for lid, c, k, h, _w, r, _s, stride, shipped in _RESNET50_ROWS:
        got = derived[lid]
        mark = "" if got == shipped else f"  MISMATCH (shipped {shipped})"
        ok &= got == shipped
        print(f"{lid:<3d} {c:<5d} {k:<5d} {h:<4d} {r}  {stride}    {got}{mark}")
    print(f"total convolutions: {total}")
    if total != 53 or not ok:
        raise SystemExit("derived counts disagree with the shipped table")
    print("shipped counts confirmed")


if __name__ == "__main__":
    main()
