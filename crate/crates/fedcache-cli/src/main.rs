fn main() {
    println!("fedcache");
}
