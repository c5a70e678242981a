"""Normalize and predict with every guidance pattern on one synthetic episode.

Each pattern reduces to the same GuidanceSet form: support image, binary
mask, guidance embedding, tag. An untrained model already produces masks;
training (see train_overfit.py) is what makes them accurate.

Run: python3 demos/seven_patterns.py
"""

import tempfile
from pathlib import Path

import torch

from fewseg import FewShotSegmenter, PatternTag, RawSupport, StubEncoder, normalize_guidance, tight_box
from fewseg.episodes import load_image, load_mask, synth_generate

root = Path(tempfile.mkdtemp(prefix="fewseg_demo_"))
manifest = synth_generate(seed=5, n_classes=6, n_images_per_class=2, image_size=64, output_dir=root)
records = manifest.by_class[2]
query_record, support_record = records[0], records[1]
print(f"dataset at {root}; class {query_record.class_id} is '{query_record.class_name}'")

query = load_image(query_record.image_path)
gt = load_mask(query_record.mask_path)
support = load_image(support_record.image_path)
support_mask = load_mask(support_record.mask_path)
box = tight_box(support_mask)

encoder = StubEncoder()
model = FewShotSegmenter(encoder, image_size=64)

raw_by_pattern = {
    PatternTag.IMAGE: RawSupport(image=support),
    PatternTag.MASK: RawSupport(image=support, mask=support_mask),
    PatternTag.BOX: RawSupport(image=support, box=box),
    PatternTag.CLASS_IMAGE: RawSupport(image=support, class_name=query_record.class_name),
    PatternTag.CLASS_MASK: RawSupport(image=support, mask=support_mask, class_name=query_record.class_name),
    PatternTag.CLASS_BOX: RawSupport(image=support, box=box, class_name=query_record.class_name),
    PatternTag.TEXT: RawSupport(class_name=query_record.class_name),
}

print(f"\n{'pattern':12s} {'mask px':>8s} {'embedding':>12s}  prediction fg px (untrained)")
for pattern, raw in raw_by_pattern.items():
    guidance = normalize_guidance(pattern, raw, query, encoder)
    pred = model.predict(query, guidance)
    print(
        f"{pattern.value:12s} {int(guidance.support_mask.sum()):8d} "
        f"{guidance.guidance_embedding.source.value:>12s}  {int(pred.sum()):6d}"
    )

print(f"\nground-truth foreground: {int(gt.sum())} px")
print("note: TEXT uses the query image itself as support, so its mask is all-ones.")
