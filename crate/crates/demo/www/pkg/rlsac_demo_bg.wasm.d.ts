/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const demo_compare: (a: number, b: number, c: number, d: bigint, e: number, f: number) => [number, number, number, number];
export const demo_new: () => [number, number, number];
export const demo_scene: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
export const demo_sweep: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_start: () => void;
