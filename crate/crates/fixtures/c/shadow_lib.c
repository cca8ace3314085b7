int f(int x) {
    return x * 3;
}

int lib_entry(int x) {
    return f(x) + 1;
}
