"""From a script with keyframes to a split layout and its attention mask.

Each shot contributes its text, then a keyframe block: ID prompt tokens
(<FrameN> plus the entities in the frame) followed by the image tokens.
Earlier shots appear as ViT and VAE conditioning blocks; the shot being
generated ends the sequence with a noised VAE block.
"""

import numpy as np

from scriptmot.data import keyframes_for
from scriptmot.layout import Keyframe, LayoutConfig, Vocabulary, layout_interleaved
from scriptmot.mask import compile_mask, oracle_mask
from scriptmot.script import parse_script, serialize_script

TEXT = """<User>
two friends meet by the river
<Character1>
a girl with a red kite
<Character2>
an old dog
<Environment1>
a river bank at dusk
<Frame1>
<Character1> waves at <Character2> on <Environment1>
<Video1>
<Character2> barks.
<Frame2>
<Character1> alone on <Environment1>
<Video2>
the kite rises.
"""

script = parse_script(TEXT)
vocab = Vocabulary.from_texts([serialize_script(script)])
# Small images keep the printout readable: 4 ViT slots and 1 latent patch.
cfg = LayoutConfig(image_size=16, vit_patch=8)
frames = {i + 1: Keyframe(i + 1, img / 255.0) for i, img in enumerate(keyframes_for(script, 0, 16))}
layout = layout_interleaved(script, frames, vocab, gen_shot=2, cfg=cfg)
print(layout.dump())

mask = compile_mask(layout)
assert mask == oracle_mask(layout)
# Print the block of the mask around shot 1's keyframe group: the ID prompt
# and image rows see each other in both directions, but text stays causal.
sp = [s for s in layout.splits if s.shot == 1 and s.role.name != "TEXT"]
lo, hi = sp[0].start - 3, sp[-1].stop + 2
print(f"rows/cols {lo}..{hi - 1}")
for row in mask.bits[lo:hi, lo:hi]:
    print("".join("#" if b else "." for b in row))

print("fraction of visible pairs:", round(float(np.mean(mask.bits)), 3))
