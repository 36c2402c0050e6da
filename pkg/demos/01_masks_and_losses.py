"""
Attention masks and the two FSA losses
======================================

Draws the default mask library as text, then scores a few hand-made class
maps with both loss stages to show how the second stage picks one mask.
"""
import numpy as np

from fsatrain import numcore as nc
from fsatrain.data import ON_ACC, default_mask_library
from fsatrain.losses import fsa_stage1, fsa_stage2

lib = default_mask_library()
print("masks per class:", dict(zip(lib.class_names, lib.counts)))

# each on_accelerator mask marks one pedal depression; the composite covers all three
shades = " .:-=+*#%@"


def show(m):
    for row in m:
        print("  " + "".join(shades[min(int(v * 10), 9)] for v in row))


for k, r in enumerate(lib.rasters(ON_ACC)):
    print(f"on_accelerator mask {k}")
    show(r)
print("composite")
show(lib.composite(ON_ACC))

# a class map that already looks like mask 2, written as logits (sigmoid inverse)
with nc.precision("float64"):
    target = np.clip(lib.rasters(ON_ACC)[2], 0.02, 0.98)
    cams = np.zeros((1, 5, 8, 8))
    cams[0, ON_ACC] = np.log(target / (1 - target))
    cams[0, [0, 1, 2, 4]] = -4.0      # other classes mostly quiet

    l1, b1 = fsa_stage1(nc.Tensor(cams), [ON_ACC], lib)
    l2, b2 = fsa_stage2(nc.Tensor(cams), [ON_ACC], lib)

# stage 1 still asks for all three spots; stage 2 is satisfied by the one it matches
print(f"stage 1: first term {b1.fsa_first:.4f}, leakage {b1.fsa_reg:.4f}")
print(f"stage 2: first term {b2.fsa_first:.4f}, selected mask {b2.selected[0]}")
