"""Per-hop latency, real-time factor and state size of the full-size streaming model.

Uses random weights: cost does not depend on the weight values.
"""

import argparse

import numpy as np

from voicequery.model import init_weights, preset
from voicequery.streaming import (
    auxiliary_state_bytes,
    init_stream,
    latency_trend,
    paired_latency_trend,
    profile_stream,
    state_size_bytes,
)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--variant", default="crnn-750m")
    p.add_argument("--seconds", type=float, default=60.0)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    hp = preset(a.variant)
    rng = np.random.default_rng(a.seed)
    w = init_weights(hp, rng)
    audio = rng.normal(0, 0.1, int(a.seconds * 16000))

    times, rtf = profile_stream(audio, w, hp)
    raw = latency_trend(times)
    paired = paired_latency_trend(audio, w, hp, seed=a.seed)
    st = init_stream(hp)
    print(f"variant {a.variant}, {a.seconds:g} s of audio, {len(times)} hops")
    print(f"real-time factor      {rtf:.4f}")
    print(f"hop latency median    {1e3 * raw['median_s']:.3f} ms   p99 {1e3 * raw['p99_s']:.3f} ms")
    print(f"raw slope             {raw['slope_s_per_hop']:.3e} s/hop (p={raw['p_value']:.2g})")
    print(f"paired slope          {paired['slope_s_per_hop']:.3e} s/hop (p={paired['p_value']:.2g}), "
          f"drift {100 * paired['relative_drift']:.2f}% of median")
    print(f"core state            {state_size_bytes(st, hp)} B")
    for name, size in auxiliary_state_bytes(st).items():
        print(f"  + {name:<18}{size} B")


if __name__ == "__main__":
    main()
