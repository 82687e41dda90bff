"""
Sliced multiply-accumulate datapath
===================================

One 5-bit-operand MAC array serves both precisions: full precision runs
the high and low nibbles as two passes and recombines them exactly;
draft mode runs only the high-nibble pass and lands on the
midpoint-augmented surrogate weights.
"""

import numpy as np

from elasticmoe.bitnest import quantize_group, split_slices, surrogate_codes, ReconstructMode
from elasticmoe.slicemac import SliceMode, sliced_dot, dequant_dot

rng = np.random.default_rng(11)
weights = rng.normal(0.0, 0.3, size=32)
group = quantize_group(weights)
acts = rng.integers(-127, 128, size=32)

pairs = [split_slices(int(c)) for c in group.codes]

# Full precision: the two nibble passes reproduce the int8 dot exactly.
full = sliced_dot(acts, pairs, SliceMode.FULL_PRECISION)
direct = int(np.dot(acts, group.codes))
print("sliced full-precision dot:", full)
print("direct int8 dot:          ", direct)
assert full == direct

# Draft: one pass, equivalent to dotting against 16*msb + 8.
draft = sliced_dot(acts, pairs, SliceMode.DRAFT_MSB_ONLY)
surrogate = surrogate_codes(group.codes, ReconstructMode.LSB_AUGMENT)
print("\nsliced draft dot:            ", draft)
print("dot against surrogate codes: ", int(np.dot(acts, surrogate)))
assert draft == int(np.dot(acts, surrogate))

# With the two scales applied, the full-precision path equals the float
# product of dequantized operands bit for bit.
act_scale = 0.0125
real = dequant_dot(acts, group, act_scale, SliceMode.FULL_PRECISION)
print("\nscaled dot:", real)
print("reference: ", full * group.scale * act_scale)
assert real == full * group.scale * act_scale
