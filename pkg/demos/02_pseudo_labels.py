"""
Mining pseudo labels for unknown objects
========================================

Base scenes carry boxes only for base categories. Everything else in the
room is an "unknown" object whose boxes we mine from 2D masks, lift to
3D and then weight so that shaky pseudo labels get a softer voice in the
auxiliary losses.
"""

import numpy as np

from fi3det import (
    MiningConfig,
    MiningStats,
    WorldConfig,
    combined_weights,
    generate_scene,
    iou3d,
    mine_unknown_objects,
    oracle_features,
    render_frames,
    supervised_pseudo_iou,
)

# A noisy world: false masks, masks that swallow two objects, dropped
# masks and noisy image features.
world = WorldConfig(feature_noise=0.1, vlm_feature_noise=0.3, false_mask_rate=0.3,
                    merge_mask_rate=0.3, mask_dropout=0.1)
scene = generate_scene(world, seed=3, scene_id="demo")
names = [world.names[i] for i in scene.gt_labels]
print("objects in the room:", names)

# Treat the first six categories as annotated base classes.
base = set(world.names[:6])
base_gt = [b for b, n in zip(scene.gt_boxes, names) if n in base]
unknown_gt = [b for b, n in zip(scene.gt_boxes, names) if n not in base]

# Render posed RGB-D frames with masks, lift every mask and box it.
frames = render_frames(scene, world, seed=3)
stats = MiningStats()
pseudo = mine_unknown_objects(frames, base_gt, MiningConfig(), stats)
print(f"{len(frames)} frames -> {stats.candidates} candidates, {stats.merged} merged, "
      f"{stats.suppressed} suppressed as base, {len(pseudo)} pseudo objects")

# How good is each pseudo box against the unknown objects it should find?
for obj in pseudo:
    best = max((iou3d(obj.box, g) for g in unknown_gt), default=0.0)
    print(f"  pseudo box at {np.round(obj.box.center, 2)}  best IoU {best:.2f}")

# Weight every (point, pseudo box) pair: a Gaussian on the distance to the
# box centre times the consistency of the image features inside the box.
_, feat2d = oracle_features(scene, world, seed=3)
weighted = combined_weights(scene.xyz, pseudo, feat2d, sigma=0.5)
flat = combined_weights(scene.xyz, pseudo, feat2d, sigma=0.5, use_point=False, use_box=False)
print("box weights:", np.round(weighted.box_weight, 2))

# The weights move supervision mass towards the better pseudo boxes.
for label, field in (("weighted", weighted), ("unweighted", flat)):
    iou, mass = supervised_pseudo_iou(field, pseudo, scene.gt_boxes)
    print(f"{label:>10}: supervision-weighted pseudo IoU {iou:.3f} (mass {mass:.1f})")
