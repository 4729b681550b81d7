"""Bundle of frozen pieces shared by training and evaluation."""
from __future__ import annotations

from dataclasses import dataclass

from .data import CropSpec, ImageStore
from .encoders import FrozenEncoders
from .face2text import FaceProjection, init_projection


@dataclass(eq=False)
class Runtime:
    encoders: FrozenEncoders
    projection: FaceProjection
    images: ImageStore

    @classmethod
    def create(cls, enc: FrozenEncoders, projection_seed: int = 0, crop: CropSpec | None = None,
               root=None, projection: FaceProjection | None = None) -> "Runtime":
        proj = projection or init_projection(enc.face_dim, enc.token_embed_dim, projection_seed)
        return cls(enc, proj, ImageStore.for_backend(enc, crop, root))

    def with_projection(self, projection: FaceProjection) -> "Runtime":
        return Runtime(self.encoders, projection, self.images)
