fn main() {
    println!("semnoma cli placeholder");
}
