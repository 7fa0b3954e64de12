fn main() {
    println!("lpv");
}
