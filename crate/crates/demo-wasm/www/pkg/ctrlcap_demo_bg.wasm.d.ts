/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const box_overlaps: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const canvas_size: () => number;
export const describe_scene: (a: number, b: number) => [number, number, number, number];
export const region_view: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const render_scene: (a: number, b: number) => [number, number, number, number];
export const score_caption: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number];
export const view_size: () => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
