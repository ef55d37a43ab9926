/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const demo_frameRgba: (a: number, b: number, c: number, d: number) => [number, number];
export const demo_frames: (a: number) => number;
export const demo_new: (a: number, b: number) => [number, number, number];
export const demo_patternCount: (a: number) => number;
export const demo_patternLabel: (a: number, b: number) => [number, number];
export const demo_scores: (a: number) => [number, number, number, number];
export const demo_simulate: (a: number, b: number, c: number) => [number, number];
export const demo_size: (a: number) => number;
export const demo_svdFilter: (a: number, b: number, c: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
