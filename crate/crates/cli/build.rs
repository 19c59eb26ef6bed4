use std::process::Command;

fn main() {
    println!("cargo:rerun-if-changed=../../.git/HEAD");
    println!("cargo:rerun-if-changed=../../.git/index");
    let pkg = std::env::var("CARGO_PKG_VERSION").unwrap_or_default();
    let describe = Command::new("git")
        .args(["describe", "--tags", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty());
    let version = match describe {
        Some(d) if d.starts_with('v') => d,
        Some(d) => format!("v{pkg}-g{d}"),
        None => format!("v{pkg}"),
    };
    println!("cargo:rustc-env=KDLM_VERSION={version}");
}
