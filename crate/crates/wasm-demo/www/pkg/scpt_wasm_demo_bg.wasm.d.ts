/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_scalogram_free: (a: number, b: number) => void;
export const morse_peak: (a: number, b: number) => number;
export const morse_window: (a: number, b: number, c: number, d: number) => [number, number];
export const scalogram: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number];
export const scalogram_cols: (a: number) => number;
export const scalogram_ridge_hz: (a: number) => number;
export const scalogram_rows: (a: number) => number;
export const scalogram_values: (a: number) => [number, number];
export const subspace_spectrum: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
