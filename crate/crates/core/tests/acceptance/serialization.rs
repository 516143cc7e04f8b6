//! Weight file and manifest round-trips, and rejection of damaged files.

use snowkit::dataset::Manifest;
use snowkit::models::{build_critic, build_unet, load_weights, CriticConfig, Network, UnetConfig, WeightStore, FORMAT_VERSION};
use snowkit::Error;

use crate::{ensure, Outcome};

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn expect<T>(what: &str, r: Result<T, Error>, ok: impl Fn(&Error) -> bool) -> Result<(), String> {
    match r {
        Err(e) if ok(&e) => Ok(()),
        Err(e) => Err(format!("{what}: wrong error {e}")),
        Ok(_) => Err(format!("{what}: accepted")),
    }
}

fn weights(tmp: &std::path::Path) -> Result<usize, String> {
    let spec = build_unet(UnetConfig { depth: 2, base_channels: 4, channels: 3 }).map_err(err)?;
    let net = Network::init(spec.clone(), 5).map_err(err)?;
    let store = net.to_weights();
    let bytes = store.to_bytes().map_err(err)?;
    let parsed = WeightStore::from_bytes(&bytes).map_err(err)?;
    let bit_exact = parsed.tensors.iter().zip(&store.tensors).all(|(a, b)| {
        a.name == b.name && a.shape == b.shape && a.values.iter().map(|v| v.to_bits()).eq(b.values.iter().map(|v| v.to_bits()))
    });
    ensure(parsed == store && bit_exact && parsed.tensors.len() == store.tensors.len(), || "in-memory round trip".into())?;
    let path = tmp.join("unet.msnw");
    store.save(&path).map_err(err)?;
    let loaded = load_weights(&path, &spec).map_err(err)?;
    ensure(loaded == store, || "file round trip".into())?;
    let rebuilt = Network::from_weights(spec.clone(), &loaded).map_err(err)?;
    ensure(rebuilt.to_weights() == store, || "network round trip".into())?;
    ensure(std::fs::read(&path).map_err(err)? == rebuilt.to_weights().to_bytes().map_err(err)?, || "re-saved bytes differ".into())?;

    let corrupt = |f: &dyn Fn(&mut Vec<u8>)| {
        let mut b = bytes.clone();
        f(&mut b);
        WeightStore::from_bytes(&b)
    };
    let is_corrupt = |e: &Error| matches!(e, Error::CorruptWeights(_));
    expect("truncated", corrupt(&|b| b.truncate(b.len() - 3)), is_corrupt)?;
    expect("header only", corrupt(&|b| b.truncate(10)), is_corrupt)?;
    expect("empty", WeightStore::from_bytes(&[]), is_corrupt)?;
    expect("bad magic", corrupt(&|b| b[0] = b'X'), is_corrupt)?;
    expect("trailing bytes", corrupt(&|b| b.push(0)), is_corrupt)?;
    expect("version", corrupt(&|b| b[4..6].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes())), |e| {
        matches!(e, Error::VersionMismatch { found, expected } if *found == FORMAT_VERSION + 1 && *expected == FORMAT_VERSION)
    })?;
    let other = build_critic(CriticConfig::default()).map_err(err)?;
    expect("wrong architecture", load_weights(&path, &other), |e| matches!(e, Error::FingerprintMismatch { .. }))?;
    let mut short = store.clone();
    short.tensors.pop();
    expect("missing tensor", Network::from_weights(spec.clone(), &short), |e| matches!(e, Error::WeightLayout(_)))?;
    let mut reshaped = store.clone();
    reshaped.tensors[0].shape.reverse();
    expect("wrong shape", Network::from_weights(spec, &reshaped), |e| matches!(e, Error::WeightLayout(_)))?;
    Ok(store.tensors.len())
}

fn manifest(tmp: &std::path::Path) -> Result<usize, String> {
    use snowkit::dataset::build_dataset;
    use snowkit::dataset::DatasetParams;
    use snowkit::degrade::PatchSet;
    use snowkit::imagecore::{save_image, FileFormat};

    let src = tmp.join("src");
    std::fs::create_dir_all(&src).map_err(err)?;
    for i in 0..3 {
        save_image(&crate::common::scene(40, 40 + i, i as u64), &src.join(format!("s{i}.png")), FileFormat::Png).map_err(err)?;
    }
    let params = DatasetParams { target: 32, ..DatasetParams::default() };
    let built = build_dataset(&src, &PatchSet::procedural(4, 2).map_err(err)?, &params, &tmp.join("ds"), 3).map_err(err)?;
    let text = built.to_jsonl();
    let parsed = Manifest::from_jsonl(&text).map_err(err)?;
    ensure(parsed == built && parsed.to_jsonl() == text, || "manifest round trip".into())?;
    let path = tmp.join("copy.jsonl");
    built.write(&path).map_err(err)?;
    ensure(Manifest::read(&path).map_err(err)? == built, || "manifest file round trip".into())?;
    ensure(parsed.header.params.degrade.gaussian_sigma.to_bits() == (10.0f64 / 255.0).to_bits(), || "float lost precision".into())?;
    ensure(Manifest::from_jsonl(&text[..text.len() / 2]).is_err(), || "truncated manifest accepted".into())?;
    Ok(built.records.len())
}

pub fn run() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    let tensors = weights(tmp.path())?;
    let records = manifest(tmp.path())?;
    Ok(format!(
        "{tensors} tensors and {records} manifest records round-trip bit-exactly; \
         truncation, bad magic, trailing bytes, version, fingerprint and layout damage rejected"
    ))
}
