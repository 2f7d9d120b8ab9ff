//! 3D representations: exemplar meshes, the optimizable voxel radiance
//! field, cameras, and conversions between them.

mod camera;
mod field;
mod isosurface;
mod mesh;
mod voxelize;

pub use camera::{sample_camera, Camera, CameraDefaults, CameraMode};
pub use field::{
    density_normals, Aabb, FieldGrad, Trilinear, VoxelRadianceField, DEFAULT_SIGMA_OCC,
    GRID_MAGIC, GRID_VERSION,
};
pub use isosurface::export_mesh;
pub use mesh::TriangleMesh;
pub use voxelize::{voxelize_mesh, voxelize_mesh_in};
