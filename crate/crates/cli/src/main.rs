fn main() {
    println!("qakt");
}
