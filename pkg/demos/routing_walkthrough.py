"""Push one synthetic scene through an untrained network and print what each routing level decides."""

import numpy as np

from hmrnet import tensor as T
from hmrnet.cem import hungarian, similarity
from hmrnet.data import DEFAULT_DOMAINS, default_prompts, generate_scene
from hmrnet.model import HMRNet, ModelConfig

model = HMRNet(ModelConfig(seed=0))
scenes = [generate_scene(DEFAULT_DOMAINS[d], 40 + d) for d in range(4)]
images = np.stack([s.image for s in scenes])
domains = np.array([s.domain for s in scenes])
prompts = [text for text, _, _ in default_prompts()]

with T.no_grad():
    # one training-mode pass records batch-norm statistics for the embedding init
    model.forward(images, domains, stage=1, training=True)
    model.init_embeddings({d: images[d:d + 1] for d in range(4)})
    out = model.forward(images, domains, stage=3, training=True, cem=False)
    print("global routing (one row per image):")
    for i, s in enumerate(scenes):
        print(f"  domain {s.domain}: probs {np.round(out.probs.data[i], 3)} -> expert {out.experts[i]}")

    local = out.local
    for i in range(len(scenes)):
        print(f"image {i}: entropy {local.entropy[i]:.3f}, regions {local.counts[i]}, active units {local.active[i]}")

    emb, units = model.ru_embeddings(out.fused, local, 0)
    visual, _ = model.cem_visual(emb)
    s = similarity(visual, model.prompt_matrix(prompts)).data
    for unit, col in zip(units, hungarian(s)):
        print(f"  unit {unit} <- '{prompts[col]}' ({s[units.index(unit), col]:+.3f})")

print("label map of image 0:")
for row in local.labels[0]:
    print("  " + "".join(str(v) for v in row))
