/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const alpha_bar_curve: (a: number, b: number, c: number) => [number, number, number, number];
export const class_names: () => [number, number];
export const in_top_k: (a: number, b: number, c: number, d: number) => number;
export const noised_toy: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
export const ranking: (a: number, b: number) => [number, number];
export const render_toy: (a: number, b: number, c: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_drop_slice: (a: number, b: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_start: () => void;
