#!/usr/bin/env python3
"""Independent byte-count oracle for the encoder compression ratio.

Counts bytes from the model shape alone, with no knowledge of the Rust
implementation, so it can cross-check the `fqbert quantize` report:

  float side     every encoder parameter at 4 bytes
  quantized side weights packed at w_bits, biases at 4 bytes, LN
                 parameters at 1 byte, plus per-tensor scales (3 B),
                 requant multipliers (5 B) and activation site scales
                 (3 B each, 11 per layer + the embedding output)
"""

import argparse
import math


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--layers", type=int, default=12)
    ap.add_argument("--hidden", type=int, default=768)
    ap.add_argument("--ffn", type=int, default=3072)
    ap.add_argument("--w-bits", type=int, default=4, choices=(2, 3, 4, 5, 6, 7, 8))
    args = ap.parse_args()

    l, h, f = args.layers, args.hidden, args.ffn
    weight_params = l * (4 * h * h + 2 * h * f)
    bias_params = l * (4 * h + f + h)
    ln_params = l * 4 * h

    float_bytes = 4 * (weight_params + bias_params + ln_params)

    if args.w_bits == 2:
        packed = math.ceil(weight_params / 4)
    elif args.w_bits <= 4:
        packed = math.ceil(weight_params / 2)
    else:
        packed = weight_params
    quant_bytes = (
        packed
        + 4 * bias_params
        + ln_params
        + 3 * 12 * l  # inline Scale8 on 6 weight + 6 bias tensors
        + 5 * 8 * l  # requant multiplier entries
        + 3 * (11 * l + 1)  # activation site scales
    )

    ratio = float_bytes / quant_bytes
    print(f"encoder float bytes      = {float_bytes}")
    print(f"encoder quantized bytes  = {quant_bytes}")
    print(f"compression_ratio_encoder = {ratio:.4f}")


if __name__ == "__main__":
    main()
