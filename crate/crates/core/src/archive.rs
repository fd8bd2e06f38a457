//! Single-file weight archive: an 8-byte magic tag, a version word, a
//! human-readable manifest and little-endian f32 blobs.
//!
//! Layout:
//!
//! ```text
//! "RGWEIGHT"  | version: u32 LE | manifest_len: u64 LE | manifest UTF-8 | blobs
//! ```
//!
//! The manifest carries `@`-prefixed metadata lines (arch, form, width,
//! shortcut flag, branch structure, table rows) followed by one line per
//! parameter tensor: `name dims offset`, with `offset` relative to the blob
//! region. Offsets are validated to be non-overlapping and in bounds before
//! any data is copied, and loading into a mismatched spec fails before any
//! partial mutation.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{
    build_ghostnet_spec, build_repghostnet_opts, convert_network, ghost_add_variant, Arch,
    Bottleneck, BottleneckSpec, ConvBnAct, FeatureJoin, GhostModule, Network, NetworkSpec,
    RepGhostOptions, Shortcut,
};
use crate::ops::{BatchNormParams, Conv2dParams, SEParams};
use crate::reparam::{Branch, BranchSet, RepGhostModule};

const MAGIC: &[u8; 8] = b"RGWEIGHT";
const VERSION: u32 = 1;

/// Metadata block of an archive, enough to rebuild the network skeleton.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveMeta {
    pub arch: Arch,
    pub deploy: bool,
    pub width: f64,
    pub use_shortcut: bool,
    pub opts: RepGhostOptions,
    pub shadow_join: bool,
    pub rows: Vec<BottleneckSpec>,
}

impl ArchiveMeta {
    pub fn of(net: &Network) -> Self {
        let shadow_join = net.blocks.iter().any(|b| match b {
            Bottleneck::Ghost(g) => g.module1.join == FeatureJoin::ShadowAdd,
            _ => false,
        });
        ArchiveMeta {
            arch: net.arch,
            deploy: net.is_deploy(),
            width: net.spec.width,
            use_shortcut: net.spec.use_shortcut,
            opts: net.opts,
            shadow_join,
            rows: net.spec.rows.clone(),
        }
    }

    /// The network spec this archive was written for.
    pub fn spec(&self) -> Result<NetworkSpec> {
        NetworkSpec::with_rows(self.rows.clone(), self.width, self.use_shortcut)
    }
}

// ---------------------------------------------------------------------------
// Parameter enumeration. Both walkers must visit identical names in
// identical order; the archive format depends on it.
// ---------------------------------------------------------------------------

fn visit_conv(prefix: &str, conv: &Conv2dParams, f: &mut impl FnMut(String, Vec<usize>, &[f32])) {
    f(
        format!("{prefix}.weight"),
        vec![conv.c_out, conv.c_in / conv.groups, conv.k_h, conv.k_w],
        &conv.weight,
    );
    if let Some(b) = &conv.bias {
        f(format!("{prefix}.bias"), vec![conv.c_out], b);
    }
}

fn visit_bn(prefix: &str, bn: &BatchNormParams, f: &mut impl FnMut(String, Vec<usize>, &[f32])) {
    let c = bn.channels();
    f(format!("{prefix}.gamma"), vec![c], &bn.gamma);
    f(format!("{prefix}.beta"), vec![c], &bn.beta);
    f(format!("{prefix}.mean"), vec![c], &bn.running_mean);
    f(format!("{prefix}.var"), vec![c], &bn.running_var);
    f(format!("{prefix}.eps"), vec![1], std::slice::from_ref(&bn.eps));
}

fn visit_cba(prefix: &str, cba: &ConvBnAct, f: &mut impl FnMut(String, Vec<usize>, &[f32])) {
    visit_conv(&format!("{prefix}.conv"), &cba.conv, f);
    if let Some(bn) = &cba.bn {
        visit_bn(&format!("{prefix}.bn"), bn, f);
    }
}

fn visit_se(prefix: &str, se: &SEParams, f: &mut impl FnMut(String, Vec<usize>, &[f32])) {
    visit_conv(&format!("{prefix}.reduce"), &se.reduce, f);
    visit_conv(&format!("{prefix}.expand"), &se.expand, f);
}

fn visit_repghost(
    prefix: &str,
    m: &RepGhostModule,
    f: &mut impl FnMut(String, Vec<usize>, &[f32]),
) {
    match m {
        RepGhostModule::Train(t) => {
            visit_conv(&format!("{prefix}.primary.conv"), &t.primary_conv, f);
            visit_bn(&format!("{prefix}.primary.bn"), &t.primary_bn, f);
            for b in &t.branches {
                match b {
                    Branch::Dconv3x3Bn { conv, bn } => {
                        visit_conv(&format!("{prefix}.dconv3x3.conv"), conv, f);
                        visit_bn(&format!("{prefix}.dconv3x3.bn"), bn, f);
                    }
                    Branch::Identity => {}
                    Branch::BnOnly(bn) => visit_bn(&format!("{prefix}.bnonly"), bn, f),
                    Branch::Dconv1x1Bn { conv, bn } => {
                        visit_conv(&format!("{prefix}.dconv1x1.conv"), conv, f);
                        visit_bn(&format!("{prefix}.dconv1x1.bn"), bn, f);
                    }
                }
            }
        }
        RepGhostModule::Deploy(d) => {
            visit_conv(&format!("{prefix}.primary"), &d.primary, f);
            visit_conv(&format!("{prefix}.fused_dconv"), &d.fused_dconv, f);
        }
    }
}

fn visit_ghost(prefix: &str, m: &GhostModule, f: &mut impl FnMut(String, Vec<usize>, &[f32])) {
    visit_cba(&format!("{prefix}.primary"), &m.primary, f);
    visit_cba(&format!("{prefix}.cheap"), &m.cheap, f);
}

fn visit_shortcut(prefix: &str, s: &Shortcut, f: &mut impl FnMut(String, Vec<usize>, &[f32])) {
    if let Shortcut::Downsample { dconv, pconv } = s {
        visit_cba(&format!("{prefix}.shortcut.dconv"), dconv, f);
        visit_cba(&format!("{prefix}.shortcut.pconv"), pconv, f);
    }
}

/// Visit every parameter tensor as `(name, dims, data)`, in a fixed order.
pub fn for_each_param(net: &Network, f: &mut impl FnMut(String, Vec<usize>, &[f32])) {
    visit_cba("stem", &net.stem, f);
    for (i, block) in net.blocks.iter().enumerate() {
        let p = format!("blocks.{i}");
        match block {
            Bottleneck::RepGhost(b) => {
                visit_repghost(&format!("{p}.m1"), &b.module1, f);
                if let Some(d) = &b.mid_dconv {
                    visit_cba(&format!("{p}.mid"), d, f);
                }
                if let Some(se) = &b.se {
                    visit_se(&format!("{p}.se"), se, f);
                }
                visit_repghost(&format!("{p}.m2"), &b.module2, f);
                visit_shortcut(&p, &b.shortcut, f);
            }
            Bottleneck::Ghost(b) => {
                visit_ghost(&format!("{p}.m1"), &b.module1, f);
                if let Some(d) = &b.mid_dconv {
                    visit_cba(&format!("{p}.mid"), d, f);
                }
                if let Some(se) = &b.se {
                    visit_se(&format!("{p}.se"), se, f);
                }
                visit_ghost(&format!("{p}.m2"), &b.module2, f);
                visit_shortcut(&p, &b.shortcut, f);
            }
        }
    }
    visit_cba("tail", &net.tail, f);
    visit_cba("head", &net.head, f);
    visit_cba("classifier", &net.classifier, f);
}

// Mutable mirror of the walker above.

fn visit_conv_mut(
    prefix: &str,
    conv: &mut Conv2dParams,
    f: &mut impl FnMut(String, &mut [f32]) -> Result<()>,
) -> Result<()> {
    f(format!("{prefix}.weight"), &mut conv.weight)?;
    if let Some(b) = conv.bias.as_mut() {
        f(format!("{prefix}.bias"), b)?;
    }
    Ok(())
}

fn visit_bn_mut(
    prefix: &str,
    bn: &mut BatchNormParams,
    f: &mut impl FnMut(String, &mut [f32]) -> Result<()>,
) -> Result<()> {
    f(format!("{prefix}.gamma"), &mut bn.gamma)?;
    f(format!("{prefix}.beta"), &mut bn.beta)?;
    f(format!("{prefix}.mean"), &mut bn.running_mean)?;
    f(format!("{prefix}.var"), &mut bn.running_var)?;
    f(format!("{prefix}.eps"), std::slice::from_mut(&mut bn.eps))
}

fn visit_cba_mut(
    prefix: &str,
    cba: &mut ConvBnAct,
    f: &mut impl FnMut(String, &mut [f32]) -> Result<()>,
) -> Result<()> {
    visit_conv_mut(&format!("{prefix}.conv"), &mut cba.conv, f)?;
    if let Some(bn) = cba.bn.as_mut() {
        visit_bn_mut(&format!("{prefix}.bn"), bn, f)?;
    }
    Ok(())
}

fn visit_repghost_mut(
    prefix: &str,
    m: &mut RepGhostModule,
    f: &mut impl FnMut(String, &mut [f32]) -> Result<()>,
) -> Result<()> {
    match m {
        RepGhostModule::Train(t) => {
            visit_conv_mut(&format!("{prefix}.primary.conv"), &mut t.primary_conv, f)?;
            visit_bn_mut(&format!("{prefix}.primary.bn"), &mut t.primary_bn, f)?;
            for b in &mut t.branches {
                match b {
                    Branch::Dconv3x3Bn { conv, bn } => {
                        visit_conv_mut(&format!("{prefix}.dconv3x3.conv"), conv, f)?;
                        visit_bn_mut(&format!("{prefix}.dconv3x3.bn"), bn, f)?;
                    }
                    Branch::Identity => {}
                    Branch::BnOnly(bn) => visit_bn_mut(&format!("{prefix}.bnonly"), bn, f)?,
                    Branch::Dconv1x1Bn { conv, bn } => {
                        visit_conv_mut(&format!("{prefix}.dconv1x1.conv"), conv, f)?;
                        visit_bn_mut(&format!("{prefix}.dconv1x1.bn"), bn, f)?;
                    }
                }
            }
            Ok(())
        }
        RepGhostModule::Deploy(d) => {
            visit_conv_mut(&format!("{prefix}.primary"), &mut d.primary, f)?;
            visit_conv_mut(&format!("{prefix}.fused_dconv"), &mut d.fused_dconv, f)
        }
    }
}

fn for_each_param_mut(
    net: &mut Network,
    f: &mut impl FnMut(String, &mut [f32]) -> Result<()>,
) -> Result<()> {
    visit_cba_mut("stem", &mut net.stem, f)?;
    for (i, block) in net.blocks.iter_mut().enumerate() {
        let p = format!("blocks.{i}");
        match block {
            Bottleneck::RepGhost(b) => {
                visit_repghost_mut(&format!("{p}.m1"), &mut b.module1, f)?;
                if let Some(d) = b.mid_dconv.as_mut() {
                    visit_cba_mut(&format!("{p}.mid"), d, f)?;
                }
                if let Some(se) = b.se.as_mut() {
                    visit_conv_mut(&format!("{p}.se.reduce"), &mut se.reduce, f)?;
                    visit_conv_mut(&format!("{p}.se.expand"), &mut se.expand, f)?;
                }
                visit_repghost_mut(&format!("{p}.m2"), &mut b.module2, f)?;
                if let Shortcut::Downsample { dconv, pconv } = &mut b.shortcut {
                    visit_cba_mut(&format!("{p}.shortcut.dconv"), dconv, f)?;
                    visit_cba_mut(&format!("{p}.shortcut.pconv"), pconv, f)?;
                }
            }
            Bottleneck::Ghost(b) => {
                visit_cba_mut(&format!("{p}.m1.primary"), &mut b.module1.primary, f)?;
                visit_cba_mut(&format!("{p}.m1.cheap"), &mut b.module1.cheap, f)?;
                if let Some(d) = b.mid_dconv.as_mut() {
                    visit_cba_mut(&format!("{p}.mid"), d, f)?;
                }
                if let Some(se) = b.se.as_mut() {
                    visit_conv_mut(&format!("{p}.se.reduce"), &mut se.reduce, f)?;
                    visit_conv_mut(&format!("{p}.se.expand"), &mut se.expand, f)?;
                }
                visit_cba_mut(&format!("{p}.m2.primary"), &mut b.module2.primary, f)?;
                visit_cba_mut(&format!("{p}.m2.cheap"), &mut b.module2.cheap, f)?;
                if let Shortcut::Downsample { dconv, pconv } = &mut b.shortcut {
                    visit_cba_mut(&format!("{p}.shortcut.dconv"), dconv, f)?;
                    visit_cba_mut(&format!("{p}.shortcut.pconv"), pconv, f)?;
                }
            }
        }
    }
    visit_cba_mut("tail", &mut net.tail, f)?;
    visit_cba_mut("head", &mut net.head, f)?;
    visit_cba_mut("classifier", &mut net.classifier, f)
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

fn render_meta(meta: &ArchiveMeta) -> String {
    let mut s = String::new();
    s.push_str(&format!("@arch {}\n", meta.arch.name()));
    s.push_str(&format!("@form {}\n", if meta.deploy { "deploy" } else { "train" }));
    s.push_str(&format!("@width {}\n", meta.width));
    s.push_str(&format!("@shortcut {}\n", u8::from(meta.use_shortcut)));
    s.push_str(&format!(
        "@branches identity={} dconv1x1={} bn_only={} relu_in_dconv={}\n",
        u8::from(meta.opts.branch_set.identity),
        u8::from(meta.opts.branch_set.dconv1x1),
        u8::from(meta.opts.branch_set.bn_only),
        u8::from(meta.opts.relu_in_dconv),
    ));
    s.push_str(&format!(
        "@join {}\n",
        if meta.shadow_join { "shadow_add" } else { "concat" }
    ));
    for row in &meta.rows {
        s.push_str(&format!(
            "@row {} {} {} {}\n",
            row.c_mid_half,
            row.c_out,
            u8::from(row.use_se),
            row.stride
        ));
    }
    s
}

/// Write the network's parameters to a single archive file.
pub fn save_archive(net: &Network, path: &Path) -> Result<()> {
    let mut manifest = render_meta(&ArchiveMeta::of(net));
    let mut offset = 0u64;
    for_each_param(net, &mut |name, dims, data| {
        let dims_s: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{name} {} {offset}\n", dims_s.join("x")));
        offset += 4 * data.len() as u64;
    });

    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(manifest.as_bytes())?;
    let mut err = None;
    for_each_param(net, &mut |_, _, data| {
        if err.is_some() {
            return;
        }
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        if let Err(e) = w.write_all(&bytes) {
            err = Some(e);
        }
    });
    if let Some(e) = err {
        return Err(e.into());
    }
    w.flush()?;
    Ok(())
}

struct ManifestEntry {
    name: String,
    dims: Vec<usize>,
    offset: u64,
}

fn truncated() -> Error {
    Error::Io(std::io::Error::new(
        std::io::ErrorKind::UnexpectedEof,
        "archive is truncated",
    ))
}

fn parse_manifest(text: &str) -> Result<(ArchiveMeta, Vec<ManifestEntry>)> {
    let mut arch = None;
    let mut deploy = false;
    let mut width = None;
    let mut use_shortcut = true;
    let mut opts = RepGhostOptions::default();
    let mut shadow_join = false;
    let mut rows = Vec::new();
    let mut entries = Vec::new();

    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('@') {
            let mut fields = rest.split_whitespace();
            let key = fields.next().unwrap_or("");
            match key {
                "arch" => {
                    let v = fields.next().ok_or_else(|| Error::Format("bare @arch".into()))?;
                    arch = Some(v.parse::<Arch>().map_err(|_| {
                        Error::Format(format!("unknown arch '{v}' in manifest"))
                    })?);
                }
                "form" => deploy = fields.next() == Some("deploy"),
                "width" => {
                    let v = fields.next().ok_or_else(|| Error::Format("bare @width".into()))?;
                    width = Some(
                        v.parse::<f64>()
                            .map_err(|_| Error::Format(format!("bad width '{v}'")))?,
                    );
                }
                "shortcut" => use_shortcut = fields.next() == Some("1"),
                "branches" => {
                    let mut set = BranchSet::NO_REPARAM;
                    let mut relu = false;
                    for kv in fields {
                        match kv {
                            "identity=1" => set.identity = true,
                            "dconv1x1=1" => set.dconv1x1 = true,
                            "bn_only=1" => set.bn_only = true,
                            "relu_in_dconv=1" => relu = true,
                            _ => {}
                        }
                    }
                    opts = RepGhostOptions {
                        branch_set: set,
                        relu_in_dconv: relu,
                    };
                }
                "join" => shadow_join = fields.next() == Some("shadow_add"),
                "row" => {
                    let nums: Vec<&str> = fields.collect();
                    if nums.len() != 4 {
                        return Err(Error::Format("malformed @row line".into()));
                    }
                    let parse = |s: &str| {
                        s.parse::<usize>()
                            .map_err(|_| Error::Format(format!("bad @row value '{s}'")))
                    };
                    rows.push(BottleneckSpec {
                        c_mid_half: parse(nums[0])?,
                        c_out: parse(nums[1])?,
                        use_se: nums[2] == "1",
                        stride: parse(nums[3])?,
                    });
                }
                other => return Err(Error::Format(format!("unknown manifest key '@{other}'"))),
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Format(format!("malformed manifest line '{line}'")));
        }
        let dims: Vec<usize> = fields[1]
            .split('x')
            .map(|d| {
                d.parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad dims '{}'", fields[1])))
            })
            .collect::<Result<_>>()?;
        let offset = fields[2]
            .parse::<u64>()
            .map_err(|_| Error::Format(format!("bad offset '{}'", fields[2])))?;
        entries.push(ManifestEntry {
            name: fields[0].to_string(),
            dims,
            offset,
        });
    }

    let meta = ArchiveMeta {
        arch: arch.ok_or_else(|| Error::Format("manifest missing @arch".into()))?,
        deploy,
        width: width.ok_or_else(|| Error::Format("manifest missing @width".into()))?,
        use_shortcut,
        opts,
        shadow_join,
        rows,
    };
    Ok((meta, entries))
}

fn parse_header(bytes: &[u8]) -> Result<(ArchiveMeta, Vec<ManifestEntry>, usize)> {
    if bytes.len() < 20 {
        return Err(if bytes.len() >= 8 && &bytes[0..8] == MAGIC {
            truncated()
        } else {
            Error::Format("file too short to be a weight archive".into())
        });
    }
    if &bytes[0..8] != MAGIC {
        return Err(Error::Format("bad magic tag, not a weight archive".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported archive version {version}, expected {VERSION}"
        )));
    }
    let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let blob_start = 20 + manifest_len;
    if bytes.len() < blob_start {
        return Err(truncated());
    }
    let manifest = std::str::from_utf8(&bytes[20..blob_start])
        .map_err(|_| Error::Format("manifest is not valid UTF-8".into()))?;
    let (meta, entries) = parse_manifest(manifest)?;

    // Offsets must be unique per name, non-overlapping and inside the blob.
    let blob_len = (bytes.len() - blob_start) as u64;
    let mut seen = std::collections::BTreeSet::new();
    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(entries.len());
    for e in &entries {
        if !seen.insert(e.name.clone()) {
            return Err(Error::Format(format!("duplicate tensor '{}'", e.name)));
        }
        let count: usize = e.dims.iter().product();
        if count == 0 {
            return Err(Error::Format(format!("tensor '{}' has empty dims", e.name)));
        }
        let span = 4 * count as u64;
        if e.offset + span > blob_len {
            return Err(truncated());
        }
        spans.push((e.offset, e.offset + span, &e.name));
    }
    spans.sort();
    for pair in spans.windows(2) {
        if pair[0].1 > pair[1].0 {
            return Err(Error::Format(format!(
                "tensors '{}' and '{}' overlap",
                pair[0].2, pair[1].2
            )));
        }
    }
    Ok((meta, entries, blob_start))
}

/// Read just the metadata block of an archive.
pub fn read_archive_meta(path: &Path) -> Result<ArchiveMeta> {
    let bytes = std::fs::read(path)?;
    let (meta, _, _) = parse_header(&bytes)?;
    Ok(meta)
}

fn build_skeleton(meta: &ArchiveMeta, spec: &NetworkSpec) -> Result<Network> {
    let net = match meta.arch {
        Arch::RepGhost => build_repghostnet_opts(spec, meta.opts, 0)?,
        Arch::Ghost => {
            let net = build_ghostnet_spec(spec, 0)?;
            if meta.shadow_join {
                ghost_add_variant(&net)?
            } else {
                net
            }
        }
    };
    if meta.deploy {
        convert_network(&net)
    } else {
        Ok(net)
    }
}

/// Load an archive into a network matching `spec`. Every tensor is validated
/// against the spec's skeleton (first by name, then by shape) before any
/// weight is copied.
pub fn load_archive(path: &Path, spec: &NetworkSpec) -> Result<Network> {
    let bytes = std::fs::read(path)?;
    let (meta, entries, blob_start) = parse_header(&bytes)?;
    let mut net = build_skeleton(&meta, spec)?;

    let by_name: std::collections::BTreeMap<&str, &ManifestEntry> =
        entries.iter().map(|e| (e.name.as_str(), e)).collect();

    // Validation pass: the skeleton's tensors and the archive's must agree.
    let mut expected = Vec::new();
    for_each_param(&net, &mut |name, dims, _| {
        expected.push((name, dims));
    });
    for (name, dims) in &expected {
        match by_name.get(name.as_str()) {
            None => {
                return Err(Error::Config(format!(
                    "archive is missing tensor '{name}'"
                )))
            }
            Some(e) if &e.dims != dims => {
                return Err(Error::Config(format!(
                    "shape mismatch for tensor '{}': archive has {:?}, spec needs {:?}",
                    name, e.dims, dims
                )))
            }
            Some(_) => {}
        }
    }
    if entries.len() != expected.len() {
        let known: std::collections::BTreeSet<&str> =
            expected.iter().map(|(n, _)| n.as_str()).collect();
        let extra = entries
            .iter()
            .find(|e| !known.contains(e.name.as_str()))
            .map(|e| e.name.clone())
            .unwrap_or_default();
        return Err(Error::Config(format!(
            "archive has unexpected tensor '{extra}'"
        )));
    }

    // Fill pass.
    let blob = &bytes[blob_start..];
    for_each_param_mut(&mut net, &mut |name, data| {
        let e = by_name[name.as_str()];
        let start = e.offset as usize;
        for (i, v) in data.iter_mut().enumerate() {
            let at = start + 4 * i;
            *v = f32::from_le_bytes(blob[at..at + 4].try_into().unwrap());
        }
        Ok(())
    })?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_repghostnet, count_params};

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("repghost-archive-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = build_repghostnet(0.5, true, 9).unwrap();
        let path = tmp("roundtrip.rgw");
        save_archive(&net, &path).unwrap();
        let loaded = load_archive(&path, &net.spec).unwrap();
        assert_eq!(loaded, net);
    }

    #[test]
    fn loading_into_wrong_width_names_first_tensor() {
        let net = build_repghostnet(0.5, true, 9).unwrap();
        let path = tmp("width.rgw");
        save_archive(&net, &path).unwrap();
        let wide = NetworkSpec::new(1.0, true).unwrap();
        let err = load_archive(&path, &wide).unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("stem.conv.weight"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn deploy_archive_is_smaller_and_has_no_bn_entries() {
        let net = build_repghostnet(0.5, true, 10).unwrap();
        let deploy = convert_network(&net).unwrap();
        let p_train = tmp("train.rgw");
        let p_deploy = tmp("deploy.rgw");
        save_archive(&net, &p_train).unwrap();
        save_archive(&deploy, &p_deploy).unwrap();

        let train_len = std::fs::metadata(&p_train).unwrap().len();
        let deploy_len = std::fs::metadata(&p_deploy).unwrap().len();
        assert!(deploy_len < train_len, "{deploy_len} !< {train_len}");

        // Parameter accounting agrees with the archives' relative sizes.
        assert!(count_params(&deploy, false) < count_params(&net, false));

        let mut names = Vec::new();
        for_each_param(&deploy, &mut |name, _, _| names.push(name));
        assert!(names.iter().all(|n| !n.contains("bn")), "{names:?}");

        let meta = read_archive_meta(&p_deploy).unwrap();
        assert!(meta.deploy);
        assert_eq!(meta.width, 0.5);
    }

    #[test]
    fn corrupted_archives_are_rejected() {
        let net = build_repghostnet(0.5, true, 11).unwrap();
        let path = tmp("corrupt.rgw");
        save_archive(&net, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        // Bad magic.
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_archive(&path, &net.spec).unwrap_err(),
            Error::Format(_)
        ));

        // Bad version.
        let mut bad = bytes.clone();
        bad[8] = 99;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_archive(&path, &net.spec).unwrap_err(),
            Error::Format(_)
        ));

        // Truncated blob region.
        let cut = &bytes[..bytes.len() - 64];
        std::fs::write(&path, cut).unwrap();
        assert!(matches!(
            load_archive(&path, &net.spec).unwrap_err(),
            Error::Io(_)
        ));
    }
}
