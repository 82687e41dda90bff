"""
Bit-nested weight quantization
==============================

A 32-value group is quantized to symmetric int8 codes with one shared
fp16 scale.  Each code then splits into a signed high nibble and an
unsigned low nibble, so a 4-bit draft view of the weights is just the
high nibble, no second copy of the tensor required.
"""

import numpy as np

from elasticmoe.bitnest import (
    ReconstructMode,
    quantize_group,
    dequantize,
    split_slices,
    reconstruct,
)

rng = np.random.default_rng(7)
values = rng.normal(0.0, 0.2, size=32)

group = quantize_group(values)
print("scale:", group.scale)
print("codes:", group.codes[:8], "...")

# Round-trip error is bounded by half a step per element.
err = [abs(dequantize(group, i) - values[i]) for i in range(32)]
print("max roundtrip error:", max(err), "<= half step:", group.scale / 2)

# Every code is two nibbles: code == 16*msb + lsb with lsb in [0, 16).
code = int(group.codes[3])
pair = split_slices(code)
print(f"\ncode {code} -> msb {pair.msb}, lsb {pair.lsb}")
assert 16 * pair.msb + pair.lsb == code

# Four ways to read the code back from its slices.  FULL is lossless;
# the three 4-bit views differ in how they stand in for the low nibble.
for mode in ReconstructMode:
    print(f"{mode.name:12s} -> {reconstruct(pair, mode)}")

# Truncation always under-reads by the low nibble; adding the midpoint 8
# centers the error band around zero.
trunc_res = [c - reconstruct(split_slices(c), ReconstructMode.TRUNCATE) for c in range(-127, 128)]
aug_res = [c - reconstruct(split_slices(c), ReconstructMode.LSB_AUGMENT) for c in range(-127, 128)]
print("\ntruncation residual range:", (min(trunc_res), max(trunc_res)))
print("midpoint-augmented range: ", (min(aug_res), max(aug_res)))
window = [c - reconstruct(split_slices(c), ReconstructMode.LSB_AUGMENT) for c in range(0, 16)]
print("augmented mean over one nibble period:", sum(window) / len(window))
