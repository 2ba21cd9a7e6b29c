//! Part extraction from `.gltf` / `.glb` scenes.
//!
//! A part is a mesh-bearing node. Its primitives are merged and its
//! node-to-world transform is applied to the positions.

use std::borrow::Cow;
use std::path::Path;

use base64::Engine;
use gltf::mesh::Mode;
use partforge_core::TriMesh;
use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum GltfError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("invalid document: {0}")]
    Invalid(String),
}

fn parse_err(offset: usize, message: impl Into<String>) -> GltfError {
    GltfError::Parse { offset, message: message.into() }
}

/// How primitives other than triangle lists are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModePolicy {
    /// Strips and fans are triangulated; points and lines are an error.
    #[default]
    Triangulate,
    /// Only triangle lists are accepted.
    TrianglesOnly,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ExtractOptions {
    pub modes: ModePolicy,
    /// Further split each node into vertex-connected components.
    pub split_components: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedPart {
    pub name: String,
    pub mesh: TriMesh,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GltfScene {
    pub parts: Vec<NamedPart>,
    /// Some material carries a base-color texture.
    pub has_texture: bool,
}

const GLB_HEADER: usize = 12;
const CHUNK_HEADER: usize = 8;

/// Byte offset in `text` of a 1-based line and column.
fn line_col_offset(text: &[u8], line: usize, column: usize) -> usize {
    let mut offset = 0;
    for _ in 1..line {
        match text[offset..].iter().position(|&b| b == b'\n') {
            Some(p) => offset += p + 1,
            None => return text.len(),
        }
    }
    (offset + column.saturating_sub(1)).min(text.len())
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

/// Checks the container framing that `gltf` assumes, reporting where it breaks.
fn check_glb_framing(bytes: &[u8]) -> Result<(), GltfError> {
    if bytes.len() < GLB_HEADER {
        return Err(parse_err(bytes.len(), "truncated GLB header"));
    }
    let version = read_u32(bytes, 4);
    if version != 2 {
        return Err(parse_err(4, format!("GLB version {version}, expected 2")));
    }
    let length = read_u32(bytes, 8) as usize;
    if length < GLB_HEADER + CHUNK_HEADER || length > bytes.len() {
        return Err(parse_err(8, format!("declared length {length} does not fit {} bytes", bytes.len())));
    }
    let mut at = GLB_HEADER;
    let mut first = true;
    while at < length {
        if at + CHUNK_HEADER > length {
            return Err(parse_err(at, "truncated chunk header"));
        }
        let chunk_len = read_u32(bytes, at) as usize;
        let kind = &bytes[at + 4..at + 8];
        if first && kind != b"JSON" {
            return Err(parse_err(at + 4, "first chunk is not JSON"));
        }
        if at + CHUNK_HEADER + chunk_len > length {
            return Err(parse_err(at, format!("chunk of {chunk_len} bytes overruns the container")));
        }
        first = false;
        at += CHUNK_HEADER + chunk_len;
    }
    Ok(())
}

fn load_document(bytes: &[u8]) -> Result<(gltf::Gltf, usize), GltfError> {
    let json_start = if bytes.starts_with(b"glTF") {
        check_glb_framing(bytes)?;
        GLB_HEADER + CHUNK_HEADER
    } else {
        0
    };
    let doc = gltf::Gltf::from_slice_without_validation(bytes).map_err(|e| match e {
        gltf::Error::Deserialize(j) => {
            let json = &bytes[json_start..];
            parse_err(json_start + line_col_offset(json, j.line(), j.column()), j.to_string())
        }
        gltf::Error::Binary(b) => parse_err(0, format!("{b:?}")),
        other => parse_err(0, other.to_string()),
    })?;
    Ok((doc, json_start))
}

fn decode_data_uri(uri: &str) -> Option<Result<Vec<u8>, GltfError>> {
    let rest = uri.strip_prefix("data:")?;
    Some(match rest.split_once(";base64,") {
        Some((_, payload)) => base64::engine::general_purpose::STANDARD
            .decode(payload)
            .map_err(|e| GltfError::Invalid(format!("bad base64 buffer: {e}"))),
        None => Err(GltfError::Unsupported("data URI without base64 encoding".into())),
    })
}

fn load_buffers(doc: &gltf::Gltf, base_dir: Option<&Path>) -> Result<Vec<Vec<u8>>, GltfError> {
    doc.buffers()
        .map(|b| {
            let data = match b.source() {
                gltf::buffer::Source::Bin => {
                    doc.blob.clone().ok_or_else(|| GltfError::Invalid("buffer refers to a missing BIN chunk".into()))?
                }
                gltf::buffer::Source::Uri(uri) => match decode_data_uri(uri) {
                    Some(d) => d?,
                    None => {
                        let dir = base_dir.ok_or_else(|| {
                            GltfError::Unsupported(format!("external buffer {uri:?} without a base directory"))
                        })?;
                        std::fs::read(dir.join(uri))
                            .map_err(|e| GltfError::Invalid(format!("cannot read buffer {uri:?}: {e}")))?
                    }
                },
            };
            if data.len() < b.length() {
                return Err(GltfError::Invalid(format!(
                    "buffer {} holds {} bytes, declares {}",
                    b.index(),
                    data.len(),
                    b.length()
                )));
            }
            Ok(data)
        })
        .collect()
}

type Mat4 = [[f64; 4]; 4];

fn to_f64(m: [[f32; 4]; 4]) -> Mat4 {
    m.map(|c| c.map(f64::from))
}

/// Column-major product `a·b`.
fn mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut out = [[0.0; 4]; 4];
    for (c, col) in out.iter_mut().enumerate() {
        for (r, v) in col.iter_mut().enumerate() {
            *v = (0..4).map(|k| a[k][r] * b[c][k]).sum();
        }
    }
    out
}

fn apply(m: &Mat4, p: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|r| m[0][r] * p[0] + m[1][r] * p[1] + m[2][r] * p[2] + m[3][r])
}

const IDENTITY: Mat4 = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];

fn triangulate(mode: Mode, idx: &[u32], policy: ModePolicy) -> Result<Vec<[u32; 3]>, GltfError> {
    let tris = match (mode, policy) {
        (Mode::Triangles, _) => idx.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        (Mode::TriangleStrip, ModePolicy::Triangulate) => (2..idx.len())
            .map(|i| if i % 2 == 0 { [idx[i - 2], idx[i - 1], idx[i]] } else { [idx[i - 1], idx[i - 2], idx[i]] })
            .collect(),
        (Mode::TriangleFan, ModePolicy::Triangulate) => (2..idx.len()).map(|i| [idx[0], idx[i - 1], idx[i]]).collect(),
        (other, _) => return Err(GltfError::Unsupported(format!("primitive mode {other:?}"))),
    };
    Ok(tris)
}

/// Appends a node's primitives, transformed to world space, to one mesh.
fn node_mesh(
    mesh: gltf::Mesh<'_>,
    world: &Mat4,
    buffers: &[Vec<u8>],
    options: &ExtractOptions,
) -> Result<TriMesh, GltfError> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for prim in mesh.primitives() {
        let reader = prim.reader(|b| buffers.get(b.index()).map(Vec::as_slice));
        let positions: Vec<[f64; 3]> = reader
            .read_positions()
            .ok_or_else(|| GltfError::Invalid(format!("mesh {:?} primitive without POSITION", mesh.name())))?
            .map(|p| apply(world, p.map(f64::from)))
            .collect();
        let idx: Vec<u32> = match reader.read_indices() {
            Some(i) => i.into_u32().collect(),
            None => (0..positions.len() as u32).collect(),
        };
        if let Some(bad) = idx.iter().find(|&&i| i as usize >= positions.len()) {
            return Err(GltfError::Invalid(format!("index {bad} beyond {} vertices", positions.len())));
        }
        let offset = vertices.len() as u32;
        faces.extend(triangulate(prim.mode(), &idx, options.modes)?.into_iter().map(|f| f.map(|i| i + offset)));
        vertices.extend(positions);
    }
    TriMesh::new(vertices, faces).map_err(|e| GltfError::Invalid(e.to_string()))
}

/// Splits a mesh into pieces connected through shared vertex positions.
pub fn connected_components(mesh: &TriMesh) -> Vec<TriMesh> {
    let n = mesh.vertices().len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut by_position = std::collections::BTreeMap::new();
    for (i, v) in mesh.vertices().iter().enumerate() {
        let key = v.map(|c| (c + 0.0).to_bits());
        let first = *by_position.entry(key).or_insert(i);
        let (a, b) = (find(&mut parent, first), find(&mut parent, i));
        parent[a.max(b)] = a.min(b);
    }
    for f in mesh.faces() {
        for e in 1..3 {
            let (a, b) = (find(&mut parent, f[0] as usize), find(&mut parent, f[e] as usize));
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<[u32; 3]>> = Default::default();
    for f in mesh.faces() {
        groups.entry(find(&mut parent, f[0] as usize)).or_default().push(*f);
    }
    groups
        .into_values()
        .map(|faces| {
            let mut remap = std::collections::BTreeMap::new();
            let mut verts = Vec::new();
            let faces = faces
                .iter()
                .map(|f| {
                    f.map(|i| {
                        *remap.entry(i).or_insert_with(|| {
                            verts.push(mesh.vertices()[i as usize]);
                            verts.len() as u32 - 1
                        })
                    })
                })
                .collect();
            TriMesh::new(verts, faces).expect("indices remapped in range")
        })
        .collect()
}

/// Parses a `.gltf` (JSON) or `.glb` (binary) document and returns one part
/// per mesh-bearing node of the default scene, in depth-first order. Without
/// scenes, every root node is visited in index order. External buffers are
/// resolved against `base_dir`.
pub fn extract_parts(bytes: &[u8], base_dir: Option<&Path>, options: &ExtractOptions) -> Result<GltfScene, GltfError> {
    let (doc, _) = load_document(bytes)?;
    if let Some(ext) = doc.extensions_required().next() {
        return Err(GltfError::Unsupported(format!("required extension {ext}")));
    }
    gltf::Document::from_json(doc.document.clone().into_json()).map_err(|e| match e {
        gltf::Error::Validation(errs) => GltfError::Invalid(
            errs.iter().map(|(path, err)| format!("{path}: {err}")).collect::<Vec<_>>().join("; "),
        ),
        other => GltfError::Invalid(other.to_string()),
    })?;
    let buffers = load_buffers(&doc, base_dir)?;

    let roots: Vec<gltf::Node<'_>> = match doc.default_scene().or_else(|| doc.scenes().next()) {
        Some(scene) => scene.nodes().collect(),
        None => {
            let mut is_child = vec![false; doc.nodes().len()];
            for n in doc.nodes() {
                for c in n.children() {
                    is_child[c.index()] = true;
                }
            }
            doc.nodes().filter(|n| !is_child[n.index()]).collect()
        }
    };

    let mut parts = Vec::new();
    let mut on_path = vec![false; doc.nodes().len()];
    let mut stack: Vec<(gltf::Node<'_>, Mat4, bool)> = roots.into_iter().rev().map(|n| (n, IDENTITY, false)).collect();
    while let Some((node, parent, leaving)) = stack.pop() {
        if leaving {
            on_path[node.index()] = false;
            continue;
        }
        if on_path[node.index()] {
            return Err(GltfError::Invalid(format!("node {} is its own ancestor", node.index())));
        }
        on_path[node.index()] = true;
        let world = mul(&parent, &to_f64(node.transform().matrix()));
        if let Some(mesh) = node.mesh() {
            let name = node
                .name()
                .or(mesh.name())
                .map(str::to_owned)
                .unwrap_or_else(|| format!("node{}", node.index()));
            let m = node_mesh(mesh, &world, &buffers, options)?;
            if options.split_components {
                for (i, piece) in connected_components(&m).into_iter().enumerate() {
                    parts.push(NamedPart { name: format!("{name}.{i}"), mesh: piece });
                }
            } else {
                parts.push(NamedPart { name, mesh: m });
            }
        }
        stack.push((node.clone(), parent, true));
        let children: Vec<_> = node.children().collect();
        for c in children.into_iter().rev() {
            stack.push((c, world, false));
        }
    }
    let has_texture = doc.materials().any(|m| m.pbr_metallic_roughness().base_color_texture().is_some());
    Ok(GltfScene { parts, has_texture })
}

/// Local transform of a node written by [`GlbBuilder`].
#[derive(Debug, Clone, PartialEq)]
pub enum NodeTransform {
    Identity,
    /// Column-major 4×4.
    Matrix([f64; 16]),
    Trs { translation: [f64; 3], rotation: [f64; 4], scale: [f64; 3] },
}

struct BuilderNode {
    name: String,
    mesh: Option<TriMesh>,
    transform: NodeTransform,
    children: Vec<usize>,
}

/// Writes small scenes for fixtures: every node may carry one triangle mesh,
/// stored as f32 positions and u32 indices in a single buffer.
#[derive(Default)]
pub struct GlbBuilder {
    nodes: Vec<BuilderNode>,
    roots: Vec<usize>,
    textured: bool,
    required_extensions: Vec<String>,
}

impl GlbBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a root node and returns its index.
    pub fn node(&mut self, name: &str, mesh: Option<TriMesh>, transform: NodeTransform) -> usize {
        let i = self.child_free(name, mesh, transform);
        self.roots.push(i);
        i
    }

    /// Adds a node below `parent`.
    pub fn child(&mut self, parent: usize, name: &str, mesh: Option<TriMesh>, transform: NodeTransform) -> usize {
        let i = self.child_free(name, mesh, transform);
        self.nodes[parent].children.push(i);
        i
    }

    fn child_free(&mut self, name: &str, mesh: Option<TriMesh>, transform: NodeTransform) -> usize {
        self.nodes.push(BuilderNode { name: name.to_owned(), mesh, transform, children: Vec::new() });
        self.nodes.len() - 1
    }

    /// Attaches a material with a base-color texture to every mesh.
    pub fn textured(&mut self) -> &mut Self {
        self.textured = true;
        self
    }

    pub fn require_extension(&mut self, name: &str) -> &mut Self {
        self.required_extensions.push(name.to_owned());
        self
    }

    fn document(&self, buffer_uri: Option<String>) -> (serde_json::Value, Vec<u8>) {
        let mut bin = Vec::new();
        let mut views = Vec::new();
        let mut accessors = Vec::new();
        let mut meshes = Vec::new();
        let mut nodes = Vec::new();
        for n in &self.nodes {
            let mut node = json!({ "name": n.name });
            if let Some(mesh) = &n.mesh {
                let (lo, hi) = mesh.bounds().unwrap_or(([0.0; 3], [0.0; 3]));
                let pos_offset = bin.len();
                for v in mesh.vertices() {
                    for c in v {
                        bin.extend_from_slice(&(*c as f32).to_le_bytes());
                    }
                }
                let idx_offset = bin.len();
                for f in mesh.faces() {
                    for i in f {
                        bin.extend_from_slice(&i.to_le_bytes());
                    }
                }
                views.push(json!({ "buffer": 0, "byteOffset": pos_offset, "byteLength": idx_offset - pos_offset, "target": 34962 }));
                views.push(json!({ "buffer": 0, "byteOffset": idx_offset, "byteLength": bin.len() - idx_offset, "target": 34963 }));
                let f32_bounds = |p: [f64; 3]| p.map(|c| c as f32);
                accessors.push(json!({
                    "bufferView": views.len() - 2, "componentType": 5126, "count": mesh.vertices().len(),
                    "type": "VEC3", "min": f32_bounds(lo), "max": f32_bounds(hi)
                }));
                accessors.push(json!({
                    "bufferView": views.len() - 1, "componentType": 5125, "count": 3 * mesh.faces().len(), "type": "SCALAR"
                }));
                let mut prim = json!({ "attributes": { "POSITION": accessors.len() - 2 }, "indices": accessors.len() - 1, "mode": 4 });
                if self.textured {
                    prim["material"] = json!(0);
                }
                meshes.push(json!({ "name": format!("{}_mesh", n.name), "primitives": [prim] }));
                node["mesh"] = json!(meshes.len() - 1);
            }
            match &n.transform {
                NodeTransform::Identity => {}
                NodeTransform::Matrix(m) => node["matrix"] = json!(m),
                NodeTransform::Trs { translation, rotation, scale } => {
                    node["translation"] = json!(translation);
                    node["rotation"] = json!(rotation);
                    node["scale"] = json!(scale);
                }
            }
            if !n.children.is_empty() {
                node["children"] = json!(n.children);
            }
            nodes.push(node);
        }
        while bin.len() % 4 != 0 {
            bin.push(0);
        }
        let mut buffer = json!({ "byteLength": bin.len() });
        if let Some(uri) = buffer_uri {
            buffer["uri"] = json!(uri);
        }
        let mut doc = json!({
            "asset": { "version": "2.0", "generator": "partforge fixture builder" },
            "scene": 0,
            "scenes": [{ "nodes": self.roots }],
            "nodes": nodes,
            "meshes": meshes,
            "accessors": accessors,
            "bufferViews": views,
            "buffers": if bin.is_empty() { json!([]) } else { json!([buffer]) },
        });
        if self.textured {
            // 1×1 white PNG.
            const PNG: &str = "iVBORw0KGgoAAAANSUhEUgAAAAEAAAABCAYAAAAfFcSJAAAADUlEQVR42mP8/58BAwAI/AL+hc2rNAAAAABJRU5ErkJggg==";
            doc["images"] = json!([{ "uri": format!("data:image/png;base64,{PNG}") }]);
            doc["textures"] = json!([{ "source": 0 }]);
            doc["materials"] = json!([{ "pbrMetallicRoughness": { "baseColorTexture": { "index": 0 } } }]);
        }
        if !self.required_extensions.is_empty() {
            doc["extensionsUsed"] = json!(self.required_extensions);
            doc["extensionsRequired"] = json!(self.required_extensions);
        }
        (doc, bin)
    }

    /// Binary container with the buffer in the BIN chunk.
    pub fn to_glb(&self) -> Vec<u8> {
        let (doc, bin) = self.document(None);
        let mut json = serde_json::to_vec(&doc).expect("serializable");
        while json.len() % 4 != 0 {
            json.push(b' ');
        }
        let bin_chunk = if bin.is_empty() { 0 } else { CHUNK_HEADER + bin.len() };
        let length = GLB_HEADER + CHUNK_HEADER + json.len() + bin_chunk;
        let glb = gltf::binary::Glb {
            header: gltf::binary::Header { magic: *b"glTF", version: 2, length: length as u32 },
            json: Cow::Owned(json),
            bin: (!bin.is_empty()).then_some(Cow::Owned(bin)),
        };
        glb.to_vec().expect("in-memory write")
    }

    /// JSON document with the buffer embedded as a base64 data URI.
    pub fn to_gltf(&self) -> Vec<u8> {
        let (_, bin) = self.document(None);
        let uri = format!(
            "data:application/octet-stream;base64,{}",
            base64::engine::general_purpose::STANDARD.encode(&bin)
        );
        let (doc, _) = self.document(Some(uri));
        serde_json::to_vec_pretty(&doc).expect("serializable")
    }
}
