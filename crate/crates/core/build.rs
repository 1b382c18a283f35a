fn main() {
    // Firmware modules loaded at runtime resolve their HAL imports against
    // symbols exported by the executable itself.
    println!("cargo:rustc-link-arg=-rdynamic");
    println!("cargo:rerun-if-changed=build.rs");
}
