#!/usr/bin/env python3
"""Straight-line reference for the simulated STEM frame and its PGM preview.

Prints SHA-256 digests that the C++ tests pin as regression values.
Usage: frame_oracle.py [width height seed x y]
"""
import hashlib
import math
import sys

MASK = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15


def splitmix64_stream(seed):
    state = seed & MASK
    while True:
        state = (state + GAMMA) & MASK
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        yield z ^ (z >> 31)


def frame(width, height, seed, x, y):
    lattice = width / 8.0
    sigma = lattice / 6.0
    two_sigma_sq = 2.0 * sigma * sigma
    shift_x = x * width
    shift_y = y * height
    noise = splitmix64_stream(seed)
    pixels = []
    for row in range(height):
        for col in range(width):
            dx = col - shift_x
            dx -= lattice * math.floor(dx / lattice + 0.5)
            dy = row - shift_y
            dy -= lattice * math.floor(dy / lattice + 0.5)
            value = 1000.0 + 40000.0 * math.exp(-(dx * dx + dy * dy) / two_sigma_sq)
            pixel = math.floor(value + 0.5)
            if width * height > 1:
                pixel += next(noise) & 0xFF
            pixels.append(min(pixel, 65535))
    return pixels


def pixel_bytes(pixels):
    return b"".join(p.to_bytes(2, "big") for p in pixels)


def pgm(width, height, pixels):
    lo, hi = min(pixels), max(pixels)
    span = hi - lo
    if span == 0:
        body = bytes([128] * len(pixels))
    else:
        body = bytes(((p - lo) * 255 + span // 2) // span for p in pixels)
    return f"P5 {width} {height} 255\n".encode() + body


def main():
    if len(sys.argv) == 6:
        w, h, seed = int(sys.argv[1]), int(sys.argv[2]), int(sys.argv[3])
        x, y = float(sys.argv[4]), float(sys.argv[5])
    else:
        w, h, seed, x, y = 8, 8, 42, 0.5, 0.5
    px = frame(w, h, seed, x, y)
    print("pixels_sha256", hashlib.sha256(pixel_bytes(px)).hexdigest())
    print("pgm_sha256", hashlib.sha256(pgm(w, h, px)).hexdigest())
    print("first_row", px[:w])


if __name__ == "__main__":
    main()
